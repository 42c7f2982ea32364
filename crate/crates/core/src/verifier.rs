//! Monte-Carlo check of whether `sigmoid(P)` ranks spatial locations the
//! same way the gated OCT embedding does, when `F_O = alpha · sigmoid(P) + B`.

use std::io::Write;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{contract, Error, Result, Shape};
use crate::matrix::{dot, Matrix};
use crate::metrics::seed_average;
use crate::model::seeded_stream;

fn check_query(p_hat: &Matrix, w_q: &Matrix, key: &Matrix) -> Result<()> {
    let d = p_hat.cols();
    if w_q.shape() != Shape(d, d) {
        return Err(Error::Shape {
            op: "logits",
            left: p_hat.shape(),
            right: w_q.shape(),
        });
    }
    if key.shape() != Shape(1, d) {
        return Err(Error::Shape {
            op: "logits",
            left: Shape(1, d),
            right: key.shape(),
        });
    }
    Ok(())
}

fn row_logits(q: &Matrix, w_q: &Matrix, key: &Matrix) -> Result<Vec<f64>> {
    let projected = q.matmul(w_q)?;
    Ok((0..projected.rows()).map(|i| dot(projected.row(i), key.row(0))).collect())
}

/// `((F_O ⊙ P̂) W_q)_i · key` for every location `i`; `key` is `F_T W_k`.
pub fn ideal_logits(p_hat: &Matrix, f_o: &Matrix, w_q: &Matrix, key: &Matrix) -> Result<Vec<f64>> {
    check_query(p_hat, w_q, key)?;
    let gated = f_o.hadamard(p_hat).map_err(|_| Error::Shape {
        op: "ideal_logits",
        left: p_hat.shape(),
        right: f_o.shape(),
    })?;
    row_logits(&gated, w_q, key)
}

/// `(P̂ W_q)_i · key` for every location `i`.
pub fn proxy_logits(p_hat: &Matrix, w_q: &Matrix, key: &Matrix) -> Result<Vec<f64>> {
    check_query(p_hat, w_q, key)?;
    row_logits(p_hat, w_q, key)
}

/// Tau-a: `(concordant - discordant) / (n (n - 1) / 2)`, ties in either
/// argument counting as neither.
pub fn kendall_tau(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() {
        return Err(contract(format!("kendall_tau over {} and {} values", x.len(), y.len())));
    }
    let n = x.len();
    if n < 2 {
        return Err(contract(format!("kendall_tau needs at least 2 values, got {n}")));
    }
    let mut score = 0i64;
    for i in 0..n {
        for j in (i + 1)..n {
            let s = (x[i] - x[j]).signum() * (y[i] - y[j]).signum();
            if x[i] != x[j] && y[i] != y[j] {
                score += s as i64;
            }
        }
    }
    Ok(score as f64 / (n * (n - 1) / 2) as f64)
}

/// Number of neighbouring distinct values, after sorting, whose order
/// squaring fails to keep strictly. Zero means every pair keeps its order.
pub fn squaring_violations(values: &[f64]) -> Result<usize> {
    if let Some(v) = values.iter().find(|v| !(**v >= 0.0)) {
        return Err(contract(format!("squaring keeps order only for non-negative inputs, got {v}")));
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    sorted.dedup();
    Ok(sorted.windows(2).filter(|w| !(w[0] * w[0] < w[1] * w[1])).count())
}

/// Whether `a > b` implies `a² > b²` over all pairs of `values`.
pub fn verify_squaring_monotonicity(values: &[f64]) -> Result<bool> {
    Ok(squaring_violations(values)? == 0)
}

/// Trials use streams `0..trials`; this one sits far above them.
const SIGMOID_SAMPLE_STREAM: u64 = u64::MAX;

/// `count` sigmoid outputs of logits drawn uniformly from `[-8, 8]`.
pub fn random_sigmoid_outputs(count: usize, seed: u64) -> Vec<f64> {
    let mut rng = seeded_stream(seed, SIGMOID_SAMPLE_STREAM);
    Matrix::uniform(1, count, -8.0, 8.0, &mut rng).sigmoid().into_data()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NoiseSweepConfig {
    pub n: usize,
    pub d: usize,
    pub alpha: f64,
    /// Standard deviations of `B`, ascending.
    pub noise_levels: Vec<f64>,
    pub trials: usize,
    pub seed: u64,
}

impl Default for NoiseSweepConfig {
    fn default() -> Self {
        Self {
            n: 8,
            d: 16,
            alpha: 1.0,
            noise_levels: vec![0.0, 0.05, 0.1, 0.2, 0.5, 1.0],
            trials: 500,
            seed: 0,
        }
    }
}

impl NoiseSweepConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n < 2 || self.d < 1 {
            return Err(contract(format!("sweep needs n >= 2 and d >= 1, got n={} d={}", self.n, self.d)));
        }
        if self.trials == 0 {
            return Err(contract("trials must be >= 1"));
        }
        if self.noise_levels.is_empty() {
            return Err(contract("noise_levels is empty"));
        }
        if self.noise_levels.iter().any(|s| !(*s >= 0.0) || !s.is_finite()) {
            return Err(contract("noise levels must be finite and non-negative"));
        }
        if self.noise_levels.windows(2).any(|w| w[1] < w[0]) {
            return Err(contract("noise_levels must be sorted ascending"));
        }
        if !self.alpha.is_finite() {
            return Err(contract("alpha must be finite"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RankRow {
    pub noise_std: f64,
    pub mean_tau: f64,
    /// Population standard deviation over trials.
    pub std_tau: f64,
    /// Fraction of trials whose two rankings coincide.
    pub exact_fraction: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RankReport {
    pub trials: usize,
    pub rows: Vec<RankRow>,
}

fn normal_matrix<R: Rng + ?Sized>(rows: usize, cols: usize, std: f64, rng: &mut R) -> Matrix {
    Matrix::from_fn(rows, cols, |_, _| {
        let z: f64 = StandardNormal.sample(rng);
        std * z
    })
}

/// One random attention geometry, shared by every noise level of a trial.
struct Trial {
    p_hat: Matrix,
    w_q: Matrix,
    key: Matrix,
    /// Unit-variance draw for `B`, scaled per level.
    unit_noise: Matrix,
}

impl Trial {
    fn draw(cfg: &NoiseSweepConfig, index: usize) -> Result<Self> {
        let mut rng = seeded_stream(cfg.seed, index as u64);
        let (n, d) = (cfg.n, cfg.d);
        let scale = 1.0 / (d as f64).sqrt();
        let p_hat = normal_matrix(n, d, 1.0, &mut rng).sigmoid();
        let w_q = normal_matrix(d, d, scale, &mut rng);
        let w_k = normal_matrix(d, d, scale, &mut rng);
        let f_t = normal_matrix(1, d, 1.0, &mut rng);
        let unit_noise = normal_matrix(n, d, 1.0, &mut rng);
        Ok(Self {
            key: f_t.matmul(&w_k)?,
            p_hat,
            w_q,
            unit_noise,
        })
    }

    fn tau(&self, alpha: f64, noise_std: f64) -> Result<f64> {
        let f_o = self.p_hat.scale(alpha).add(&self.unit_noise.scale(noise_std))?;
        let ideal = ideal_logits(&self.p_hat, &f_o, &self.w_q, &self.key)?;
        let proxy = proxy_logits(&self.p_hat, &self.w_q, &self.key)?;
        kendall_tau(&ideal, &proxy)
    }
}

/// Trial `t` draws from stream `t` of the configured seed, so results do not
/// depend on evaluation order, and every noise level sees the same geometry.
pub fn noise_sweep(cfg: &NoiseSweepConfig) -> Result<RankReport> {
    cfg.validate()?;
    let trials = (0..cfg.trials).map(|t| Trial::draw(cfg, t)).collect::<Result<Vec<_>>>()?;
    let rows = cfg
        .noise_levels
        .iter()
        .map(|&noise_std| {
            let taus = trials.iter().map(|t| t.tau(cfg.alpha, noise_std)).collect::<Result<Vec<_>>>()?;
            let (mean_tau, std_tau) = seed_average(&taus)?;
            let exact = taus.iter().filter(|&&t| t == 1.0).count();
            Ok(RankRow {
                noise_std,
                mean_tau,
                std_tau,
                exact_fraction: exact as f64 / taus.len() as f64,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(RankReport {
        trials: cfg.trials,
        rows,
    })
}

impl RankReport {
    /// Whether each mean is at most the previous one plus `k` pooled
    /// standard errors.
    pub fn non_increasing_within(&self, k: f64) -> bool {
        let t = self.trials as f64;
        self.rows.windows(2).all(|w| {
            let se = (w[0].std_tau.powi(2) / t + w[1].std_tau.powi(2) / t).sqrt();
            w[1].mean_tau <= w[0].mean_tau + k * se
        })
    }

    /// `noise_std,mean_tau,std_tau,exact_fraction`.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(out);
        for row in &self.rows {
            w.serialize(row)?;
        }
        if self.rows.is_empty() {
            w.write_record(["noise_std", "mean_tau", "std_tau", "exact_fraction"])?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn table(&self) -> String {
        let mut s = format!("{:>10} {:>9} {:>9} {:>7}\n", "noise_std", "mean_tau", "std_tau", "exact");
        for r in &self.rows {
            s.push_str(&format!(
                "{:>10.4} {:>9.4} {:>9.4} {:>7.3}\n",
                r.noise_std, r.mean_tau, r.std_tau, r.exact_fraction
            ));
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rows(r: &[&[f64]]) -> Matrix {
        Matrix::from_rows(&r.iter().map(|x| x.to_vec()).collect::<Vec<_>>()).unwrap()
    }

    #[test]
    fn kendall_examples() {
        let x = [0.3, -1.0, 2.5, 0.7];
        assert_eq!(kendall_tau(&x, &x).unwrap(), 1.0);
        let neg: Vec<f64> = x.iter().map(|v| -v).collect();
        assert_eq!(kendall_tau(&x, &neg).unwrap(), -1.0);
        // Pairs (1,2), (1,3) concordant; (2,3) discordant.
        assert!((kendall_tau(&[1.0, 2.0, 3.0], &[1.0, 3.0, 2.0]).unwrap() - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(kendall_tau(&[1.0, 1.0, 2.0], &[1.0, 2.0, 3.0]).unwrap(), 2.0 / 3.0);
        assert!(kendall_tau(&[1.0], &[1.0]).is_err());
        assert!(kendall_tau(&[1.0, 2.0], &[1.0]).is_err());
    }

    #[test]
    fn squaring_examples() {
        assert!(verify_squaring_monotonicity(&[0.2, 0.7]).unwrap());
        assert!(matches!(verify_squaring_monotonicity(&[-0.5, 0.3]), Err(Error::Contract(_))));
        // Negative inputs are exactly where squaring can flip an order.
        assert!(0.3f64 > -0.5 && 0.3f64.powi(2) < (-0.5f64).powi(2));
    }

    #[test]
    fn random_sigmoid_outputs_keep_order_pairwise() {
        let values = random_sigmoid_outputs(1000, 1);
        assert_eq!(values, random_sigmoid_outputs(1000, 1));
        assert!(verify_squaring_monotonicity(&values).unwrap());
        for a in &values {
            for b in &values {
                if a > b {
                    assert!(a * a > b * b);
                }
            }
        }
    }

    #[test]
    fn logits_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let p_hat = Matrix::uniform(3, 4, 0.01, 0.99, &mut rng);
        let w_q = Matrix::uniform(4, 4, -1.0, 1.0, &mut rng);
        let key = Matrix::uniform(1, 4, -1.0, 1.0, &mut rng);

        let ones = Matrix::ones(3, 4);
        let a = ideal_logits(&p_hat, &ones, &w_q, &key).unwrap();
        let b = proxy_logits(&p_hat, &w_q, &key).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-12);
        }

        let f_o = Matrix::uniform(3, 4, -2.0, 2.0, &mut rng);
        let e1 = rows(&[&[1.0, 0.0, 0.0, 0.0]]);
        let col = ideal_logits(&p_hat, &f_o, &Matrix::identity(4), &e1).unwrap();
        for i in 0..3 {
            assert!((col[i] - f_o.get(i, 0) * p_hat.get(i, 0)).abs() < 1e-15);
        }

        let sums = proxy_logits(&p_hat, &Matrix::identity(4), &Matrix::ones(1, 4)).unwrap();
        for i in 0..3 {
            assert!((sums[i] - p_hat.row(i).iter().sum::<f64>()).abs() < 1e-12);
        }

        let same = Matrix::uniform(1, 4, 0.1, 0.9, &mut rng).tile_rows(3).unwrap();
        let flat = proxy_logits(&same, &w_q, &key).unwrap();
        assert!(flat.iter().all(|v| *v == flat[0]));

        assert!(matches!(proxy_logits(&p_hat, &Matrix::ones(3, 3), &key), Err(Error::Shape { .. })));
        assert!(ideal_logits(&p_hat, &Matrix::ones(2, 4), &w_q, &key).is_err());
    }

    #[test]
    fn random_instance_matches_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (n, d) = (3, 5);
        let p_hat = Matrix::uniform(n, d, 0.01, 0.99, &mut rng);
        let f_o = Matrix::uniform(n, d, -1.0, 1.0, &mut rng);
        let w_q = Matrix::uniform(d, d, -1.0, 1.0, &mut rng);
        let key = Matrix::uniform(1, d, -1.0, 1.0, &mut rng);
        let ideal = ideal_logits(&p_hat, &f_o, &w_q, &key).unwrap();
        let proxy = proxy_logits(&p_hat, &w_q, &key).unwrap();
        for i in 0..n {
            let mut want_ideal = 0.0;
            let mut want_proxy = 0.0;
            for c in 0..d {
                for k in 0..d {
                    want_ideal += f_o.get(i, k) * p_hat.get(i, k) * w_q.get(k, c) * key.get(0, c);
                    want_proxy += p_hat.get(i, k) * w_q.get(k, c) * key.get(0, c);
                }
            }
            assert!((ideal[i] - want_ideal).abs() < 1e-12);
            assert!((proxy[i] - want_proxy).abs() < 1e-12);
        }
    }

    #[test]
    fn hand_checkable_two_row_instance() {
        let p_hat = rows(&[&[0.9, 0.9], &[0.1, 0.1]]);
        let ideal = ideal_logits(&p_hat, &p_hat, &Matrix::identity(2), &Matrix::ones(1, 2)).unwrap();
        let proxy = proxy_logits(&p_hat, &Matrix::identity(2), &Matrix::ones(1, 2)).unwrap();
        assert_eq!(kendall_tau(&ideal, &proxy).unwrap(), 1.0);
    }

    fn small_cfg() -> NoiseSweepConfig {
        NoiseSweepConfig {
            n: 4,
            d: 6,
            trials: 60,
            noise_levels: vec![0.0, 0.3, 3.0],
            ..NoiseSweepConfig::default()
        }
    }

    #[test]
    fn sweep_is_reproducible_and_bounded() {
        let cfg = NoiseSweepConfig {
            trials: 1,
            ..small_cfg()
        };
        let a = noise_sweep(&cfg).unwrap();
        assert_eq!(a, noise_sweep(&cfg).unwrap());
        let b = noise_sweep(&small_cfg()).unwrap();
        for r in &b.rows {
            assert!((-1.0..=1.0).contains(&r.mean_tau));
            assert!((0.0..=1.0).contains(&r.exact_fraction));
        }
        assert!(b.non_increasing_within(2.0));
    }

    #[test]
    fn single_level_report_and_csv() {
        let cfg = NoiseSweepConfig {
            noise_levels: vec![0.0],
            ..small_cfg()
        };
        let r = noise_sweep(&cfg).unwrap();
        assert_eq!(r.rows.len(), 1);
        let mut buf = Vec::new();
        r.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().count(), 2);
        assert!(text.starts_with("noise_std,mean_tau,std_tau,exact_fraction\n0.0,"));
        assert!(r.table().contains("mean_tau"));
    }

    #[test]
    fn sweep_config_validation() {
        for bad in [
            NoiseSweepConfig { trials: 0, ..small_cfg() },
            NoiseSweepConfig { noise_levels: vec![0.5, 0.1], ..small_cfg() },
            NoiseSweepConfig { noise_levels: vec![-0.1], ..small_cfg() },
            NoiseSweepConfig { n: 1, ..small_cfg() },
        ] {
            assert!(noise_sweep(&bad).is_err());
        }
    }

    proptest! {
        #[test]
        fn tau_is_antisymmetric(xs in proptest::collection::hash_set(-1000i32..1000, 2..12), seed in any::<u64>()) {
            let x: Vec<f64> = xs.into_iter().map(f64::from).collect();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let y: Vec<f64> = x.iter().map(|v| v * 0.5 + rng.random_range(-400.0..400.0)).collect();
            let neg: Vec<f64> = y.iter().map(|v| -v).collect();
            let t = kendall_tau(&x, &y).unwrap();
            prop_assert!((-1.0..=1.0).contains(&t));
            prop_assert!((kendall_tau(&x, &neg).unwrap() + t).abs() < 1e-15);
        }

        #[test]
        fn squaring_keeps_order_on_sigmoid_outputs(logits in proptest::collection::vec(-30.0f64..30.0, 2..200)) {
            let values: Vec<f64> = logits.iter().map(|&l| crate::matrix::sigmoid(l)).collect();
            prop_assert!(verify_squaring_monotonicity(&values).unwrap());
        }
    }
}
