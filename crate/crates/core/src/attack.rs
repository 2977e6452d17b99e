//! Loss-based membership inference against unlearned models.
//!
//! A sequence is compared against same-length neighbours: copies with a
//! fraction of positions re-filled by a generator. The attack statistic is
//! the absolute gap between the sequence's mean per-token loss and its
//! neighbours' mean — small for text the model treats like any other, large
//! both for still-memorized text and for text unlearned hard enough that the
//! model is conspicuously bad at it. Sweeping the decision threshold yields
//! a ROC curve; the distance distribution itself, compared against the band
//! unseen data occupies, measures how distinguishable the forget set remains.

use serde::{Deserialize, Serialize};

use crate::autodiff::tensor::softmax_slice;
use crate::error::{Result, UlabError};
use crate::lm::model::{forward, mean_nll, ModelCheckpoint};
use crate::lm::sequence::{SourceTag, TokenSequence};
use crate::rng::Rng;

/// How masked positions are re-filled when constructing neighbours.
pub trait FillStrategy {
    fn tag(&self) -> String;

    /// One categorical distribution over the vocabulary per position of
    /// `origin`; index `p` conditions on `origin[..p]`. Position 0 is never
    /// masked and may be a placeholder.
    fn distributions(&self, origin: &[u32]) -> Result<Vec<Vec<f32>>>;
}

/// Default proxy: sample fills from a reference checkpoint's next-token
/// distribution given the original left context. Experiments pass the
/// pre-unlearning model here.
pub struct ModelProxyFill<'a> {
    pub model: &'a ModelCheckpoint,
}

impl FillStrategy for ModelProxyFill<'_> {
    fn tag(&self) -> String {
        format!("model-proxy@step{}", self.model.step)
    }

    fn distributions(&self, origin: &[u32]) -> Result<Vec<Vec<f32>>> {
        let pass = forward(self.model, origin, false)?;
        let v = self.model.config.vocab;
        let logits = pass.tape.value(pass.logits);
        let mut dists = Vec::with_capacity(origin.len());
        dists.push(vec![0.0; v]); // position 0 placeholder
        for p in 1..origin.len() {
            dists.push(softmax_slice(&logits[(p - 1) * v..p * v]));
        }
        Ok(dists)
    }
}

/// Uniform random token fills.
pub struct UniformFill {
    pub vocab: usize,
}

impl FillStrategy for UniformFill {
    fn tag(&self) -> String {
        "uniform".into()
    }

    fn distributions(&self, origin: &[u32]) -> Result<Vec<Vec<f32>>> {
        let d = vec![1.0 / self.vocab as f32; self.vocab];
        Ok(vec![d; origin.len()])
    }
}

/// Fills drawn from corpus unigram frequencies.
pub struct UnigramFill {
    weights: Vec<f32>,
}

impl UnigramFill {
    pub fn from_corpus(corpus: &[TokenSequence], vocab: usize) -> Self {
        let mut weights = vec![0.0f32; vocab];
        for seq in corpus {
            for &t in &seq.tokens {
                if (t as usize) < vocab {
                    weights[t as usize] += 1.0;
                }
            }
        }
        UnigramFill { weights }
    }
}

impl FillStrategy for UnigramFill {
    fn tag(&self) -> String {
        "corpus-unigram".into()
    }

    fn distributions(&self, origin: &[u32]) -> Result<Vec<Vec<f32>>> {
        Ok(vec![self.weights.clone(); origin.len()])
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NeighbourSet {
    pub origin_id: String,
    pub neighbours: Vec<TokenSequence>,
    /// Positions at which each neighbour was re-filled.
    pub masked_positions: Vec<Vec<usize>>,
    pub mask_frac: f32,
    pub generator_tag: String,
    pub seed: u64,
}

/// Build `n` neighbours of `x`, each with ceil(mask_frac * T) positions
/// re-sampled from the generator. Position 0 is never masked, every
/// neighbour keeps the origin's length, and the whole construction is
/// deterministic under the seed.
pub fn gen_neighbours(
    x: &TokenSequence,
    n: usize,
    mask_frac: f32,
    generator: &dyn FillStrategy,
    seed: u64,
) -> Result<NeighbourSet> {
    if n == 0 {
        return Err(UlabError::contract("gen_neighbours: need n >= 1"));
    }
    if !(0.0..=1.0).contains(&mask_frac) {
        return Err(UlabError::contract(format!(
            "gen_neighbours: mask_frac must be in [0, 1], got {mask_frac}"
        )));
    }
    let t_len = x.tokens.len();
    let n_mask = ((mask_frac as f64 * t_len as f64).ceil() as usize).min(t_len - 1);
    let dists = if n_mask > 0 {
        generator.distributions(&x.tokens)?
    } else {
        Vec::new()
    };

    let mut rng = Rng::new(seed);
    let mut neighbours = Vec::with_capacity(n);
    let mut masked_positions = Vec::with_capacity(n);
    for i in 0..n {
        let mut positions = rng.sample_indices(t_len - 1, n_mask);
        for p in &mut positions {
            *p += 1; // shift out of position 0
        }
        positions.sort_unstable();
        let mut tokens = x.tokens.clone();
        for &p in &positions {
            tokens[p] = rng.categorical(&dists[p]) as u32;
        }
        neighbours.push(TokenSequence {
            id: format!("{}~nb{}", x.id, i),
            tokens,
            source: x.source,
        });
        masked_positions.push(positions);
    }
    Ok(NeighbourSet {
        origin_id: x.id.clone(),
        neighbours,
        masked_positions,
        mask_frac,
        generator_tag: generator.tag(),
        seed,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MembershipLabel {
    Member,
    NonMember,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MiauScore {
    pub id: String,
    pub member_loss: f64,
    pub neighbour_mean_loss: f64,
    /// |member_loss - neighbour_mean_loss|
    pub distance: f64,
    pub label: MembershipLabel,
}

/// The attack statistic for one sequence against its neighbour set.
pub fn miau_distance(
    m: &ModelCheckpoint,
    x: &TokenSequence,
    nb: &NeighbourSet,
    label: MembershipLabel,
) -> Result<MiauScore> {
    if nb.origin_id != x.id {
        return Err(UlabError::contract(format!(
            "neighbour set belongs to `{}`, not `{}`",
            nb.origin_id, x.id
        )));
    }
    let member_loss = mean_nll(m, x)?;
    let mut total = 0.0f64;
    for neighbour in &nb.neighbours {
        total += mean_nll(m, neighbour)?;
    }
    let neighbour_mean_loss = total / nb.neighbours.len() as f64;
    Ok(MiauScore {
        id: x.id.clone(),
        member_loss,
        neighbour_mean_loss,
        distance: (member_loss - neighbour_mean_loss).abs(),
        label,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RocCurve {
    /// (FPR, TPR) from (0,0) to (1,1), threshold swept across observed
    /// distances from high to low.
    pub points: Vec<(f64, f64)>,
    pub auc: f64,
}

/// ROC of the decision rule "member iff distance > threshold", sweeping the
/// threshold over all observed distances. AUC by the trapezoid rule; tied
/// distances are grouped, which makes the area equal the rank statistic with
/// the half-tie convention.
pub fn roc(members: &[MiauScore], nonmembers: &[MiauScore]) -> Result<RocCurve> {
    if members.is_empty() || nonmembers.is_empty() {
        return Err(UlabError::contract(
            "roc: both classes must be non-empty",
        ));
    }
    let mut scored: Vec<(f64, bool)> = members
        .iter()
        .map(|s| (s.distance, true))
        .chain(nonmembers.iter().map(|s| (s.distance, false)))
        .collect();
    scored.sort_by(|a, b| b.0.partial_cmp(&a.0).expect("distances are finite"));

    let pos = members.len() as f64;
    let neg = nonmembers.len() as f64;
    let mut points = vec![(0.0, 0.0)];
    let mut tp = 0.0f64;
    let mut fp = 0.0f64;
    let mut i = 0;
    while i < scored.len() {
        let threshold = scored[i].0;
        while i < scored.len() && scored[i].0 == threshold {
            if scored[i].1 {
                tp += 1.0;
            } else {
                fp += 1.0;
            }
            i += 1;
        }
        points.push((fp / neg, tp / pos));
    }
    let mut auc = 0.0f64;
    for w in points.windows(2) {
        let (x0, y0) = w[0];
        let (x1, y1) = w[1];
        auc += (x1 - x0) * (y0 + y1) / 2.0;
    }
    Ok(RocCurve { points, auc })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LomaReport {
    pub bin_width: f64,
    /// Histogram of forget-set distances from 0 in `bin_width` steps.
    pub forget_bins: Vec<usize>,
    pub unseen_bins: Vec<usize>,
    /// Upper edge of the measured unseen-data band: the largest distance any
    /// unseen sequence shows.
    pub band_hi: f64,
    /// Fraction of forget-set distances inside [0, band_hi].
    pub forget_in_band: f64,
}

fn histogram(distances: &[f64], bin_width: f64, n_bins: usize) -> Vec<usize> {
    let mut bins = vec![0usize; n_bins];
    for &d in distances {
        let idx = ((d / bin_width) as usize).min(n_bins - 1);
        bins[idx] += 1;
    }
    bins
}

/// Distance histograms of the forget set against the band unseen data
/// occupies on the same model. The band is measured, not assumed.
pub fn loma(
    forget_scores: &[MiauScore],
    unseen_scores: &[MiauScore],
    bin_width: f64,
) -> Result<LomaReport> {
    if forget_scores.is_empty() || unseen_scores.is_empty() {
        return Err(UlabError::contract(
            "loma: need forget and unseen distance samples",
        ));
    }
    if bin_width <= 0.0 {
        return Err(UlabError::contract("loma: bin width must be positive"));
    }
    let forget: Vec<f64> = forget_scores.iter().map(|s| s.distance).collect();
    let unseen: Vec<f64> = unseen_scores.iter().map(|s| s.distance).collect();
    let band_hi = unseen.iter().cloned().fold(0.0f64, f64::max);
    let max_d = forget
        .iter()
        .chain(&unseen)
        .cloned()
        .fold(0.0f64, f64::max);
    let n_bins = ((max_d / bin_width).floor() as usize + 1).max(1);
    let in_band = forget.iter().filter(|&&d| d <= band_hi).count();
    Ok(LomaReport {
        bin_width,
        forget_bins: histogram(&forget, bin_width, n_bins),
        unseen_bins: histogram(&unseen, bin_width, n_bins),
        band_hi,
        forget_in_band: in_band as f64 / forget.len() as f64,
    })
}

/// Full attack artifact for one (model, forget set, unseen sample) triple.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackReport {
    pub generator_tag: String,
    pub mask_frac: f32,
    pub n_neighbours: usize,
    pub members: Vec<MiauScore>,
    pub nonmembers: Vec<MiauScore>,
    pub roc: RocCurve,
    pub loma: LomaReport,
}

/// Score members (the forget set) and nonmembers (unseen sample) on `model`
/// using pre-built neighbour sets keyed by position.
pub fn run_attack(
    model: &ModelCheckpoint,
    forget: &[TokenSequence],
    forget_neighbours: &[NeighbourSet],
    unseen: &[TokenSequence],
    unseen_neighbours: &[NeighbourSet],
    bin_width: f64,
) -> Result<AttackReport> {
    if forget.len() != forget_neighbours.len() || unseen.len() != unseen_neighbours.len() {
        return Err(UlabError::contract(
            "run_attack: one neighbour set per sequence",
        ));
    }
    for seq in unseen {
        if seq.source != SourceTag::Unseen {
            return Err(UlabError::Provenance(format!(
                "nonmember `{}` is tagged {:?}",
                seq.id, seq.source
            )));
        }
    }
    let members: Vec<MiauScore> = forget
        .iter()
        .zip(forget_neighbours)
        .map(|(x, nb)| miau_distance(model, x, nb, MembershipLabel::Member))
        .collect::<Result<_>>()?;
    let nonmembers: Vec<MiauScore> = unseen
        .iter()
        .zip(unseen_neighbours)
        .map(|(x, nb)| miau_distance(model, x, nb, MembershipLabel::NonMember))
        .collect::<Result<_>>()?;
    let roc = roc(&members, &nonmembers)?;
    let loma = loma(&members, &nonmembers, bin_width)?;
    let (generator_tag, mask_frac, n_neighbours) = forget_neighbours
        .first()
        .map(|nb| (nb.generator_tag.clone(), nb.mask_frac, nb.neighbours.len()))
        .unwrap_or_default();
    Ok(AttackReport {
        generator_tag,
        mask_frac,
        n_neighbours,
        members,
        nonmembers,
        roc,
        loma,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lm::model::ModelConfig;
    use crate::lm::tokenizer::{tokenize, BYTE_VOCAB};
    use crate::rng::Rng;

    fn model(seed: u64) -> ModelCheckpoint {
        ModelCheckpoint::init(&ModelConfig {
            layers: 1,
            heads: 2,
            dim: 16,
            context: 40,
            seed,
            ..ModelConfig::default()
        })
        .unwrap()
    }

    fn score(id: &str, distance: f64, label: MembershipLabel) -> MiauScore {
        MiauScore {
            id: id.into(),
            member_loss: 0.0,
            neighbour_mean_loss: distance,
            distance,
            label,
        }
    }

    #[test]
    fn zero_mask_neighbours_equal_origin() {
        let m = model(1);
        let x = tokenize("x", "hello neighbour", SourceTag::Train);
        let gen = ModelProxyFill { model: &m };
        let nb = gen_neighbours(&x, 3, 0.0, &gen, 7).unwrap();
        assert_eq!(nb.neighbours.len(), 3);
        for n in &nb.neighbours {
            assert_eq!(n.tokens, x.tokens);
        }
    }

    #[test]
    fn neighbours_have_origin_length_and_differ_only_on_mask() {
        let m = model(2);
        let x = tokenize("x", "the quick brown fox jumps", SourceTag::Train);
        let gen = ModelProxyFill { model: &m };
        let nb = gen_neighbours(&x, 4, 0.3, &gen, 11).unwrap();
        for (n, mask) in nb.neighbours.iter().zip(&nb.masked_positions) {
            assert_eq!(n.tokens.len(), x.tokens.len());
            for (p, (&a, &b)) in x.tokens.iter().zip(&n.tokens).enumerate() {
                if !mask.contains(&p) {
                    assert_eq!(a, b, "position {p} differs outside the mask");
                }
            }
            assert!(!mask.contains(&0), "position 0 must never be masked");
        }
    }

    #[test]
    fn neighbour_generation_is_seed_deterministic() {
        let m = model(3);
        let x = tokenize("x", "determinism check line", SourceTag::Train);
        let gen = ModelProxyFill { model: &m };
        let a = gen_neighbours(&x, 5, 0.2, &gen, 99).unwrap();
        let b = gen_neighbours(&x, 5, 0.2, &gen, 99).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn uniform_and_unigram_fills_work() {
        let x = tokenize("x", "abc", SourceTag::Train);
        let uni = UniformFill { vocab: BYTE_VOCAB };
        let nb = gen_neighbours(&x, 2, 0.5, &uni, 1).unwrap();
        assert_eq!(nb.generator_tag, "uniform");
        let gram = UnigramFill::from_corpus(std::slice::from_ref(&x), BYTE_VOCAB);
        let nb2 = gen_neighbours(&x, 2, 0.5, &gram, 1).unwrap();
        assert_eq!(nb2.generator_tag, "corpus-unigram");
        // unigram over this corpus can only emit tokens that occur in it
        for n in &nb2.neighbours {
            for &t in &n.tokens {
                assert!(x.tokens.contains(&t));
            }
        }
    }

    #[test]
    fn miau_distance_zero_for_identical_neighbours() {
        let m = model(4);
        let x = tokenize("x", "no mask here", SourceTag::Train);
        let gen = ModelProxyFill { model: &m };
        let nb = gen_neighbours(&x, 3, 0.0, &gen, 5).unwrap();
        let s = miau_distance(&m, &x, &nb, MembershipLabel::Member).unwrap();
        assert_eq!(s.distance, 0.0);
    }

    #[test]
    fn miau_distance_invariant_to_neighbour_order() {
        let m = model(5);
        let x = tokenize("x", "ordering does not matter", SourceTag::Train);
        let gen = ModelProxyFill { model: &m };
        let mut nb = gen_neighbours(&x, 4, 0.25, &gen, 13).unwrap();
        let a = miau_distance(&m, &x, &nb, MembershipLabel::Member).unwrap();
        nb.neighbours.reverse();
        nb.masked_positions.reverse();
        let b = miau_distance(&m, &x, &nb, MembershipLabel::Member).unwrap();
        assert!((a.distance - b.distance).abs() < 1e-12);
    }

    #[test]
    fn memorized_member_shows_large_distance_to_fresh_neighbours() {
        // overfit on one line: its loss collapses while neighbours with
        // resampled tokens stay expensive, so the attack statistic is large
        let x = tokenize("m", "secret line to memorize", SourceTag::Train);
        let mut m = ModelCheckpoint::init(&ModelConfig {
            layers: 1,
            heads: 2,
            dim: 32,
            context: 32,
            seed: 31,
            ..ModelConfig::default()
        })
        .unwrap();
        crate::lm::train(
            &mut m,
            std::slice::from_ref(&x),
            &crate::lm::TrainOptions {
                epochs: 300,
                lr: 1e-3,
                batch: 1,
                seed: 3,
            },
        )
        .unwrap();
        let gen = UniformFill { vocab: BYTE_VOCAB };
        let nb = gen_neighbours(&x, 6, 0.5, &gen, 17).unwrap();
        let s = miau_distance(&m, &x, &nb, MembershipLabel::Member).unwrap();
        assert!(s.member_loss < 0.5, "member loss {}", s.member_loss);
        assert!(
            s.neighbour_mean_loss > 2.0,
            "neighbour loss {}",
            s.neighbour_mean_loss
        );
        assert!(s.distance > 1.5, "distance {}", s.distance);
    }

    #[test]
    fn mean_nll_matches_uniform_analytic() {
        // An untrained tied-head model is very close to uniform over V=259.
        let m = model(6);
        let x = tokenize("x", "any text", SourceTag::Unseen);
        let nll = mean_nll(&m, &x).unwrap();
        let uniform = (BYTE_VOCAB as f64).ln(); // ln 259 ~ 5.557
        assert!((nll - uniform).abs() < 0.2, "nll {nll} vs {uniform}");
    }

    #[test]
    fn mean_nll_matches_independent_softmax_accumulation() {
        // utility_metrics recomputes per-position NLL from its own softmax
        // path; both must agree on random sequences
        let m = model(7);
        let mut rng = Rng::new(41);
        for _ in 0..10 {
            let len = 3 + rng.below(12);
            let x = crate::lm::TokenSequence::new(
                "r",
                (0..len).map(|_| rng.below(BYTE_VOCAB) as u32).collect(),
                SourceTag::Unseen,
            )
            .unwrap();
            let a = mean_nll(&m, &x).unwrap();
            let b = crate::lab::utility_metrics(&m, std::slice::from_ref(&x))
                .unwrap()
                .cross_entropy;
            assert!((a - b).abs() < 1e-6, "{a} vs {b}");
        }
    }

    #[test]
    fn roc_perfect_separation_has_auc_one() {
        let members = vec![
            score("m1", 0.9, MembershipLabel::Member),
            score("m2", 0.8, MembershipLabel::Member),
        ];
        let nonmembers = vec![
            score("n1", 0.1, MembershipLabel::NonMember),
            score("n2", 0.2, MembershipLabel::NonMember),
        ];
        let curve = roc(&members, &nonmembers).unwrap();
        assert_eq!(curve.auc, 1.0);
        assert_eq!(*curve.points.first().unwrap(), (0.0, 0.0));
        assert_eq!(*curve.points.last().unwrap(), (1.0, 1.0));
    }

    #[test]
    fn roc_identical_distributions_near_half() {
        let mut rng = Rng::new(17);
        let members: Vec<MiauScore> = (0..200)
            .map(|i| score(&format!("m{i}"), rng.next_f64(), MembershipLabel::Member))
            .collect();
        let nonmembers: Vec<MiauScore> = (0..200)
            .map(|i| score(&format!("n{i}"), rng.next_f64(), MembershipLabel::NonMember))
            .collect();
        let curve = roc(&members, &nonmembers).unwrap();
        assert!((curve.auc - 0.5).abs() < 0.08, "auc {}", curve.auc);
    }

    /// Mann-Whitney AUC with the half-tie convention.
    fn rank_auc(members: &[f64], nonmembers: &[f64]) -> f64 {
        let mut wins = 0.0f64;
        for &m in members {
            for &n in nonmembers {
                if m > n {
                    wins += 1.0;
                } else if m == n {
                    wins += 0.5;
                }
            }
        }
        wins / (members.len() as f64 * nonmembers.len() as f64)
    }

    #[test]
    fn roc_auc_matches_rank_statistic_with_ties() {
        let member_d = [0.9, 0.7, 0.7, 0.4, 0.2];
        let nonmember_d = [0.7, 0.3, 0.2, 0.1, 0.05];
        let members: Vec<MiauScore> = member_d
            .iter()
            .enumerate()
            .map(|(i, &d)| score(&format!("m{i}"), d, MembershipLabel::Member))
            .collect();
        let nonmembers: Vec<MiauScore> = nonmember_d
            .iter()
            .enumerate()
            .map(|(i, &d)| score(&format!("n{i}"), d, MembershipLabel::NonMember))
            .collect();
        let curve = roc(&members, &nonmembers).unwrap();
        let oracle = rank_auc(&member_d, &nonmember_d);
        assert!(
            (curve.auc - oracle).abs() < 1e-12,
            "trapezoid {} vs rank {oracle}",
            curve.auc
        );
    }

    #[test]
    fn roc_points_are_monotone() {
        let mut rng = Rng::new(23);
        let members: Vec<MiauScore> = (0..50)
            .map(|i| score(&format!("m{i}"), rng.next_f64() + 0.2, MembershipLabel::Member))
            .collect();
        let nonmembers: Vec<MiauScore> = (0..70)
            .map(|i| score(&format!("n{i}"), rng.next_f64(), MembershipLabel::NonMember))
            .collect();
        let curve = roc(&members, &nonmembers).unwrap();
        for w in curve.points.windows(2) {
            assert!(w[1].0 >= w[0].0);
            assert!(w[1].1 >= w[0].1);
        }
    }

    #[test]
    fn roc_rejects_empty_class() {
        let members = vec![score("m", 0.5, MembershipLabel::Member)];
        assert!(roc(&members, &[]).is_err());
    }

    #[test]
    fn loma_all_zero_distances_single_bin() {
        let forget: Vec<MiauScore> = (0..6)
            .map(|i| score(&format!("f{i}"), 0.0, MembershipLabel::Member))
            .collect();
        let unseen = vec![score("u", 0.0, MembershipLabel::NonMember)];
        let rep = loma(&forget, &unseen, 0.25).unwrap();
        assert_eq!(rep.forget_bins, vec![6]);
        assert_eq!(rep.forget_in_band, 1.0);
    }

    #[test]
    fn loma_counts_conserve() {
        let mut rng = Rng::new(31);
        let forget: Vec<MiauScore> = (0..40)
            .map(|i| score(&format!("f{i}"), rng.next_f64() * 3.0, MembershipLabel::Member))
            .collect();
        let unseen: Vec<MiauScore> = (0..20)
            .map(|i| score(&format!("u{i}"), rng.next_f64() * 0.5, MembershipLabel::NonMember))
            .collect();
        let rep = loma(&forget, &unseen, 0.25).unwrap();
        assert_eq!(rep.forget_bins.iter().sum::<usize>(), 40);
        assert_eq!(rep.unseen_bins.iter().sum::<usize>(), 20);
        assert!(rep.band_hi <= 0.5);
    }
}
