//! Wall-clock seconds, stubbed on wasm where `std::time::Instant` is unusable.

#[cfg(not(target_arch = "wasm32"))]
pub fn timer() -> impl Fn() -> f64 {
    let start = std::time::Instant::now();
    move || start.elapsed().as_secs_f64()
}

#[cfg(target_arch = "wasm32")]
pub fn timer() -> impl Fn() -> f64 {
    || 0.0
}
