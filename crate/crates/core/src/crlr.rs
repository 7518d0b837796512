//! Categorical causally regularized logistic regression over VQ-VAE code grids.
//!
//! Each sample is the concatenated one-hot encoding of its L codes. For every code
//! slot `j`, samples are grouped by the category at `j`; the regularizer sums the
//! squared distances between the weighted mean encodings of the other slots across
//! every pair of occupied groups.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Adam, Param};
use crate::vqvae::CodeGrid;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CodedSample {
    pub codes: Vec<usize>,
    pub action: usize,
}

impl CodedSample {
    pub fn from_grid(grid: &CodeGrid, action: usize) -> Self {
        CodedSample { codes: grid.indices.clone(), action }
    }

    /// Dense one-hot vector of length `L·K`.
    pub fn one_hot(&self, k: usize) -> Vec<f64> {
        let mut v = vec![0.0; self.codes.len() * k];
        for (j, &c) in self.codes.iter().enumerate() {
            v[j * k + c] = 1.0;
        }
        v
    }
}

pub fn softplus(u: f64) -> f64 {
    if u > 30.0 {
        u
    } else {
        u.exp().ln_1p()
    }
}

fn sigmoid(u: f64) -> f64 {
    1.0 / (1.0 + (-u).exp())
}

/// Raw parameters `u`; effective weights are `softplus(u) > 0`.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleWeights {
    pub raw: Vec<f64>,
}

impl SampleWeights {
    /// Every effective weight equal to one.
    pub fn ones(n: usize) -> Self {
        SampleWeights { raw: vec![(std::f64::consts::E - 1.0).ln(); n] }
    }

    pub fn effective(&self) -> Vec<f64> {
        self.raw.iter().map(|&u| softplus(u)).collect()
    }

    /// Effective weights scaled to sum to one, for reporting.
    pub fn normalized(&self) -> Vec<f64> {
        let w = self.effective();
        let s: f64 = w.iter().sum();
        w.iter().map(|v| v / s).collect()
    }
}

fn check(samples: &[CodedSample], k: usize) -> Result<usize> {
    let l = samples.first().map(|s| s.codes.len()).unwrap_or(0);
    for s in samples {
        if s.codes.len() != l || s.codes.iter().any(|&c| c >= k) {
            return Err(Error::ShapeMismatch("coded samples disagree in length or exceed K".into()));
        }
    }
    Ok(l)
}

/// True when no slot has two occupied categories; the regularizer is then zero.
pub fn degenerate(samples: &[CodedSample]) -> bool {
    let l = samples.first().map(|s| s.codes.len()).unwrap_or(0);
    (0..l).all(|j| samples.iter().all(|s| s.codes[j] == samples[0].codes[j]))
}

/// Regularizer value and, when requested, its gradient with respect to the effective weights.
fn regularizer_impl(samples: &[CodedSample], k: usize, w: &[f64], want_grad: bool) -> Result<(f64, Vec<f64>)> {
    let l = check(samples, k)?;
    if w.len() != samples.len() {
        return Err(Error::ShapeMismatch(format!("{} weights for {} samples", w.len(), samples.len())));
    }
    let lk = l * k;
    let mut total = 0.0;
    let mut grad = vec![0.0; if want_grad { samples.len() } else { 0 }];
    let mut slot: Vec<Option<usize>> = vec![None; k];
    for j in 0..l {
        // Occupied categories at slot j, their weight sums and weighted one-hot sums.
        slot.iter_mut().for_each(|s| *s = None);
        let mut sums: Vec<Vec<f64>> = Vec::new();
        let mut mass: Vec<f64> = Vec::new();
        for (i, s) in samples.iter().enumerate() {
            let g = *slot[s.codes[j]].get_or_insert_with(|| {
                sums.push(vec![0.0; lk]);
                mass.push(0.0);
                sums.len() - 1
            });
            mass[g] += w[i];
            for (jj, &c) in s.codes.iter().enumerate() {
                if jj != j {
                    sums[g][jj * k + c] += w[i];
                }
            }
        }
        let m = sums.len();
        if m < 2 {
            continue;
        }
        let means: Vec<Vec<f64>> = sums.iter().zip(&mass).map(|(s, &wc)| s.iter().map(|v| v / wc).collect()).collect();
        let mut tsum = vec![0.0; lk];
        let mut sq = 0.0;
        for mu in &means {
            for (t, &v) in tsum.iter_mut().zip(mu) {
                *t += v;
            }
            sq += mu.iter().map(|v| v * v).sum::<f64>();
        }
        total += m as f64 * sq - tsum.iter().map(|v| v * v).sum::<f64>();
        if want_grad {
            // dR/dμ_c = 2(m μ_c − Σμ);  dμ_c/dw_i = (q_i − μ_c) / W_c for i in group c.
            let gc: Vec<Vec<f64>> = means
                .iter()
                .map(|mu| mu.iter().zip(&tsum).map(|(&v, &t)| 2.0 * (m as f64 * v - t)).collect())
                .collect();
            let g_dot_mu: Vec<f64> = gc.iter().zip(&means).map(|(g, mu)| g.iter().zip(mu).map(|(a, b)| a * b).sum()).collect();
            for (i, s) in samples.iter().enumerate() {
                let c = slot[s.codes[j]].unwrap();
                let g_dot_q: f64 =
                    s.codes.iter().enumerate().filter(|(jj, _)| *jj != j).map(|(jj, &q)| gc[c][jj * k + q]).sum();
                grad[i] += (g_dot_q - g_dot_mu[c]) / mass[c];
            }
        }
    }
    Ok((total, grad))
}

pub fn causal_regularizer(samples: &[CodedSample], k: usize, weights: &[f64]) -> Result<f64> {
    Ok(regularizer_impl(samples, k, weights, false)?.0)
}

/// Linear softmax classifier over the one-hot code vector.
#[derive(Debug, Clone)]
pub struct CodeClassifier {
    pub weight: Param<f64>,
    pub bias: Param<f64>,
    pub positions: usize,
    pub codebook_size: usize,
    pub action_count: usize,
}

impl CodeClassifier {
    pub fn zeros(positions: usize, codebook_size: usize, action_count: usize) -> Self {
        CodeClassifier {
            weight: Param::zeros("crlr.weight", &[action_count, positions * codebook_size]),
            bias: Param::zeros("crlr.bias", &[action_count]),
            positions,
            codebook_size,
            action_count,
        }
    }

    pub fn logits(&self, s: &CodedSample) -> Vec<f64> {
        let lk = self.positions * self.codebook_size;
        (0..self.action_count)
            .map(|a| {
                self.bias.value[a]
                    + s.codes.iter().enumerate().map(|(j, &c)| self.weight.value[a * lk + j * self.codebook_size + c]).sum::<f64>()
            })
            .collect()
    }

    /// `−log π(a | q)`.
    pub fn nll(&self, s: &CodedSample) -> f64 {
        let z = self.logits(s);
        let mx = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = mx + z.iter().map(|v| (v - mx).exp()).sum::<f64>().ln();
        lse - z[s.action]
    }

    /// Accumulates the gradient of `Σ w_i · nll_i`.
    fn accumulate_grad(&mut self, samples: &[CodedSample], w: &[f64]) {
        let lk = self.positions * self.codebook_size;
        for (s, &wi) in samples.iter().zip(w) {
            let z = self.logits(s);
            let mx = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = z.iter().map(|v| (v - mx).exp()).collect();
            let se: f64 = e.iter().sum();
            for a in 0..self.action_count {
                let g = wi * (e[a] / se - (a == s.action) as u8 as f64);
                self.bias.grad[a] += g;
                for (j, &c) in s.codes.iter().enumerate() {
                    self.weight.grad[a * lk + j * self.codebook_size + c] += g;
                }
            }
        }
    }

    pub fn act(&self, s: &CodedSample) -> usize {
        crate::policy::argmax(&self.logits(s))
    }
}

/// `Σ_i w_i · (−log π(a_i | q_i)) + λ · regularizer`.
pub fn crlr_loss(clf: &CodeClassifier, samples: &[CodedSample], weights: &[f64], lambda: f64) -> Result<f64> {
    let fit: f64 = samples.iter().zip(weights).map(|(s, &w)| w * clf.nll(s)).sum();
    Ok(fit + lambda * causal_regularizer(samples, clf.codebook_size, weights)?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CrlrConfig {
    /// The fit term is a sum over samples, so a useful λ grows with N. At 0.1 on ~60k
    /// samples the weight step is all fit term and the regularizer drifts up.
    pub lambda: f64,
    pub iterations: usize,
    /// Adam step size for the classifier.
    pub lr: f64,
    /// Adam step size for the raw sample weights.
    pub weight_lr: f64,
}

impl Default for CrlrConfig {
    fn default() -> Self {
        CrlrConfig { lambda: 10.0, iterations: 500, lr: 0.01, weight_lr: 0.01 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CrlrRecord {
    pub iteration: usize,
    pub loss: f64,
    pub regularizer: f64,
}

pub struct CrlrResult {
    pub classifier: CodeClassifier,
    pub weights: SampleWeights,
    pub degenerate: bool,
}

/// Alternates one classifier step and one weight step per iteration.
pub fn train_crlr(
    samples: &[CodedSample],
    codebook_size: usize,
    action_count: usize,
    cfg: &CrlrConfig,
    mut on_iter: impl FnMut(&CrlrRecord),
) -> Result<CrlrResult> {
    if samples.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let l = check(samples, codebook_size)?;
    let mut clf = CodeClassifier::zeros(l, codebook_size, action_count);
    let mut weights = SampleWeights::ones(samples.len());
    let mut u = Param::<f64>::zeros("crlr.u", &[samples.len()]);
    u.value = weights.raw.clone();
    let mut opt_clf = Adam::new(cfg.lr);
    let mut opt_w = Adam::new(cfg.weight_lr);
    for iteration in 0..cfg.iterations {
        let w = weights.effective();
        clf.weight.zero_grad();
        clf.bias.zero_grad();
        clf.accumulate_grad(samples, &w);
        opt_clf.step(&mut [&mut clf.weight, &mut clf.bias]);

        let (_, rgrad) = regularizer_impl(samples, codebook_size, &w, true)?;
        for (i, s) in samples.iter().enumerate() {
            u.grad[i] = (clf.nll(s) + cfg.lambda * rgrad[i]) * sigmoid(u.value[i]);
        }
        opt_w.step(&mut [&mut u]);
        weights.raw = u.value.clone();
        let w = weights.effective();
        let reg_after = causal_regularizer(samples, codebook_size, &w)?;
        let fit: f64 = samples.iter().zip(&w).map(|(s, &wi)| wi * clf.nll(s)).sum();
        on_iter(&CrlrRecord { iteration, loss: fit + cfg.lambda * reg_after, regularizer: reg_after });
    }
    Ok(CrlrResult { classifier: clf, weights, degenerate: degenerate(samples) })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;
    use rand::Rng as _;

    /// Direct transcription of the nested sum with dense one-hot vectors.
    fn brute_force(samples: &[CodedSample], k: usize, w: &[f64]) -> f64 {
        let l = samples[0].codes.len();
        let mut total = 0.0;
        for j in 0..l {
            for c1 in 0..k {
                for c2 in c1 + 1..k {
                    let group = |c: usize| -> Option<Vec<f64>> {
                        let members: Vec<usize> = (0..samples.len()).filter(|&i| samples[i].codes[j] == c).collect();
                        if members.is_empty() {
                            return None;
                        }
                        let wsum: f64 = members.iter().map(|&i| w[i]).sum();
                        let mut mean = vec![0.0; l * k];
                        for &i in &members {
                            let mut q = samples[i].one_hot(k);
                            q[j * k..(j + 1) * k].iter_mut().for_each(|v| *v = 0.0);
                            for (m, v) in mean.iter_mut().zip(q) {
                                *m += w[i] * v / wsum;
                            }
                        }
                        Some(mean)
                    };
                    if let (Some(a), Some(b)) = (group(c1), group(c2)) {
                        total += a.iter().zip(&b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>();
                    }
                }
            }
        }
        total
    }

    fn random_instance(rng: &mut crate::rng::Rng) -> (Vec<CodedSample>, usize, Vec<f64>) {
        let n = rng.gen_range(2..=8);
        let l = rng.gen_range(1..=3);
        let k = rng.gen_range(1..=3);
        let s = (0..n)
            .map(|_| CodedSample { codes: (0..l).map(|_| rng.gen_range(0..k)).collect(), action: rng.gen_range(0..3) })
            .collect();
        let w = (0..n).map(|_| rng.gen_range(0.1..2.0)).collect();
        (s, k, w)
    }

    #[test]
    fn matches_brute_force_on_random_instances() {
        let mut rng = seeded(0);
        for _ in 0..300 {
            let (s, k, w) = random_instance(&mut rng);
            let fast = causal_regularizer(&s, k, &w).unwrap();
            assert!((fast - brute_force(&s, k, &w)).abs() < 1e-10);
        }
    }

    #[test]
    fn hand_instance() {
        // Slot 0: groups {0,1} and {2,3}; slot-1 means (1,0) and (½,½) → ½.
        // Slot 1: groups {0,1,2} and {3}; slot-0 means (⅔,⅓) and (0,1) → 8/9.
        let s: Vec<CodedSample> =
            [[0, 0], [0, 0], [1, 0], [1, 1]].iter().map(|c| CodedSample { codes: c.to_vec(), action: 0 }).collect();
        let w = [1.0; 4];
        let expected = 0.5 + 8.0 / 9.0;
        assert!((causal_regularizer(&s, 2, &w).unwrap() - expected).abs() < 1e-12);
        assert!((brute_force(&s, 2, &w) - expected).abs() < 1e-12);
        let balanced: Vec<CodedSample> =
            [[0, 0], [0, 1], [1, 0], [1, 1]].iter().map(|c| CodedSample { codes: c.to_vec(), action: 0 }).collect();
        assert!(causal_regularizer(&balanced, 2, &w).unwrap().abs() < 1e-15);
    }

    #[test]
    fn identical_samples_give_zero() {
        let s = vec![CodedSample { codes: vec![1, 2], action: 0 }; 5];
        assert_eq!(causal_regularizer(&s, 3, &[1.0; 5]).unwrap(), 0.0);
        assert!(degenerate(&s));
    }

    #[test]
    fn weight_gradient_matches_finite_differences() {
        let mut rng = seeded(1);
        for _ in 0..50 {
            let (s, k, w) = random_instance(&mut rng);
            let (_, g) = regularizer_impl(&s, k, &w, true).unwrap();
            for i in 0..w.len() {
                let mut wp = w.clone();
                wp[i] += 1e-6;
                let mut wm = w.clone();
                wm[i] -= 1e-6;
                let fd = (causal_regularizer(&s, k, &wp).unwrap() - causal_regularizer(&s, k, &wm).unwrap()) / 2e-6;
                assert!((fd - g[i]).abs() < 1e-6 * (1.0 + fd.abs()), "{fd} vs {}", g[i]);
            }
        }
    }

    #[test]
    fn loss_reductions() {
        let s = vec![CodedSample { codes: vec![0, 1], action: 2 }, CodedSample { codes: vec![1, 1], action: 0 }];
        let mut clf = CodeClassifier::zeros(2, 2, 3);
        clf.weight.value[3] = 0.7;
        let bc: f64 = s.iter().map(|x| clf.nll(x)).sum();
        assert!((crlr_loss(&clf, &s, &[1.0, 1.0], 0.0).unwrap() - bc).abs() < 1e-12);
        assert!((crlr_loss(&clf, &s, &[3.0, 3.0], 0.0).unwrap() - 3.0 * bc).abs() < 1e-12);
    }

    #[test]
    fn zero_iterations_return_initial_classifier() {
        let s = vec![CodedSample { codes: vec![0], action: 1 }];
        let r = train_crlr(&s, 2, 3, &CrlrConfig { iterations: 0, ..CrlrConfig::default() }, |_| {}).unwrap();
        assert!(r.classifier.weight.value.iter().all(|&v| v == 0.0));
        assert!(matches!(train_crlr(&[], 2, 3, &CrlrConfig::default(), |_| {}), Err(Error::EmptyDataset)));
    }

    #[test]
    fn training_balances_groups_and_keeps_weights_positive() {
        let mut rng = seeded(3);
        let s: Vec<CodedSample> = (0..50)
            .map(|_| {
                let a = rng.gen_range(0..2);
                let conf = if rng.gen::<f64>() < 0.8 { a } else { 1 - a };
                CodedSample { codes: vec![a, conf, rng.gen_range(0..2)], action: a }
            })
            .collect();
        let cfg = CrlrConfig { lambda: 10.0, iterations: 100, ..CrlrConfig::default() };
        let mut hist = Vec::new();
        let r = train_crlr(&s, 2, 3, &cfg, |h| hist.push(*h)).unwrap();
        let start = causal_regularizer(&s, 2, &[1.0; 50]).unwrap();
        assert!(hist.last().unwrap().regularizer < start);
        assert!(hist.iter().all(|h| h.loss.is_finite()));
        assert!(r.weights.effective().iter().all(|&w| w > 0.0));
    }
}
