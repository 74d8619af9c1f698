//! Random problem instance generation: signature sequences, device
//! activity, Rayleigh channels, noise, and the sample covariance.

use nalgebra::Complex;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::objective::GammaVector;
use crate::{C64, CMatrix};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
}

/// Per-device large-scale gain: a single shared value or one per device.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Gain {
    Uniform(f64),
    PerDevice(Vec<f64>),
}

impl Gain {
    pub fn of_device(&self, n: usize) -> f64 {
        match self {
            Gain::Uniform(g) => *g,
            Gain::PerDevice(v) => v[n],
        }
    }
}

/// Simulation parameters for one problem instance.
///
/// All powers are normalized by the device transmit power, so `sigma_w_sq`
/// and `gain` are dimensionless.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SystemConfig {
    /// Number of devices N.
    pub n: usize,
    /// Sequences per device Q = 2^J for J data bits.
    pub q: usize,
    /// Signature sequence length L.
    pub l: usize,
    /// Number of BS antennas M.
    pub m: usize,
    /// Number of active devices K.
    pub k: usize,
    /// Normalized noise variance.
    pub sigma_w_sq: f64,
    /// Large-scale gain(s).
    pub gain: Gain,
    /// Master RNG seed.
    pub seed: u64,
}

impl SystemConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |msg: &str| Err(ModelError::InvalidConfig(msg.to_string()));
        if self.n < 1 || self.q < 1 || self.l < 1 || self.m < 1 {
            return bad("N, Q, L, M must all be >= 1");
        }
        if self.k > self.n {
            return bad("K must not exceed N");
        }
        if self.sigma_w_sq.is_nan() || self.sigma_w_sq <= 0.0 {
            return bad("sigma_w_sq must be positive");
        }
        match &self.gain {
            Gain::Uniform(g) => {
                if *g < 0.0 {
                    return bad("gain must be nonnegative");
                }
            }
            Gain::PerDevice(v) => {
                if v.len() != self.n {
                    return bad("per-device gain vector must have length N");
                }
                if v.iter().any(|g| *g < 0.0) {
                    return bad("gain must be nonnegative elementwise");
                }
            }
        }
        Ok(())
    }

    /// Total number of optimization variables NQ.
    pub fn nq(&self) -> usize {
        self.n * self.q
    }
}

/// Purposes for which independent RNG streams are derived from one seed,
/// so each component can be regenerated on its own.
#[derive(Debug, Clone, Copy)]
pub enum RngPurpose {
    Signatures = 0,
    Activity = 1,
    Channel = 2,
    Noise = 3,
    Solver = 4,
}

/// Deterministic per-purpose stream derived from the master seed.
pub fn rng_stream(seed: u64, purpose: RngPurpose) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(purpose as u64);
    rng
}

fn complex_standard_normal<R: Rng + ?Sized>(rng: &mut R) -> C64 {
    // Unit variance convention: E[|x|^2] = 1, so real and imaginary parts
    // each carry variance 1/2.
    let re: f64 = rng.sample(StandardNormal);
    let im: f64 = rng.sample(StandardNormal);
    Complex::new(re, im) * std::f64::consts::FRAC_1_SQRT_2
}

/// The L x NQ matrix of signature sequences; column (n, q) is the q-th
/// sequence of device n at flat index n*Q + q.
#[derive(Debug, Clone, PartialEq)]
pub struct SignatureMatrix {
    entries: CMatrix,
    q: usize,
}

impl SignatureMatrix {
    pub fn new(entries: CMatrix, q: usize) -> Result<Self, ModelError> {
        if q == 0 || !entries.ncols().is_multiple_of(q) {
            return Err(ModelError::DimensionMismatch(
                "column count must be a multiple of Q".into(),
            ));
        }
        Ok(Self { entries, q })
    }

    pub fn entries(&self) -> &CMatrix {
        &self.entries
    }

    pub fn q(&self) -> usize {
        self.q
    }

    pub fn n_devices(&self) -> usize {
        self.entries.ncols() / self.q
    }

    pub fn seq_len(&self) -> usize {
        self.entries.nrows()
    }

    pub fn n_sequences(&self) -> usize {
        self.entries.ncols()
    }

    pub fn flat_index(&self, device: usize, seq: usize) -> usize {
        device * self.q + seq
    }

    pub fn column(&self, flat: usize) -> nalgebra::DVectorView<'_, C64> {
        self.entries.column(flat)
    }
}

/// Ground-truth activity: which devices are active and which sequence each
/// selected.
#[derive(Debug, Clone, PartialEq)]
pub struct TruthAssignment {
    /// Per device: `None` if inactive, else the selected sequence index q.
    selected: Vec<Option<usize>>,
    gamma_true: GammaVector,
    q: usize,
}

impl TruthAssignment {
    pub fn new(selected: Vec<Option<usize>>, gains: &Gain, q: usize) -> Self {
        let n = selected.len();
        let mut gamma = GammaVector::zeros(n * q);
        for (dev, sel) in selected.iter().enumerate() {
            if let Some(s) = sel {
                gamma.set(dev * q + s, gains.of_device(dev));
            }
        }
        Self {
            selected,
            gamma_true: gamma,
            q,
        }
    }

    pub fn selected(&self) -> &[Option<usize>] {
        &self.selected
    }

    pub fn gamma_true(&self) -> &GammaVector {
        &self.gamma_true
    }

    pub fn q(&self) -> usize {
        self.q
    }

    pub fn n_devices(&self) -> usize {
        self.selected.len()
    }

    pub fn active_count(&self) -> usize {
        self.selected.iter().filter(|s| s.is_some()).count()
    }

    /// Binary selection indicator chi_{n,q}.
    pub fn chi(&self, device: usize, seq: usize) -> bool {
        self.selected[device] == Some(seq)
    }

    /// Flat indices of the transmitted sequences (the true support).
    pub fn support(&self) -> Vec<usize> {
        self.selected
            .iter()
            .enumerate()
            .filter_map(|(dev, sel)| sel.map(|s| dev * self.q + s))
            .collect()
    }
}

/// The L x M received signal.
#[derive(Debug, Clone, PartialEq)]
pub struct ReceivedSignal {
    pub y: CMatrix,
}

/// The L x L Hermitian sample covariance Y Y^H / M.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleCovariance {
    pub sigma_hat: CMatrix,
}

/// Draws all signature sequences i.i.d. circularly-symmetric complex
/// Gaussian with zero mean and unit variance.
pub fn generate_signatures(cfg: &SystemConfig, rng: &mut ChaCha8Rng) -> SignatureMatrix {
    let entries =
        CMatrix::from_fn(cfg.l, cfg.n * cfg.q, |_, _| complex_standard_normal(rng));
    SignatureMatrix { entries, q: cfg.q }
}

/// Picks K active devices uniformly without replacement; each active
/// device selects one of its Q sequences uniformly.
pub fn sample_activity(
    cfg: &SystemConfig,
    rng: &mut ChaCha8Rng,
) -> Result<TruthAssignment, ModelError> {
    if cfg.k > cfg.n {
        return Err(ModelError::InvalidConfig("K must not exceed N".into()));
    }
    let chosen = rand::seq::index::sample(rng, cfg.n, cfg.k);
    let mut selected = vec![None; cfg.n];
    // Sorted device order keeps the sequence draws independent of the
    // sampler's internal ordering.
    let mut devices: Vec<usize> = chosen.into_iter().collect();
    devices.sort_unstable();
    for dev in devices {
        selected[dev] = Some(rng.random_range(0..cfg.q));
    }
    Ok(TruthAssignment::new(selected, &cfg.gain, cfg.q))
}

/// Synthesizes Y = sum_{n,q} chi_{n,q} s_{n,q} sqrt(g_n) h_n^T + W with
/// i.i.d. unit-variance Rayleigh components and noise variance sigma_w_sq.
pub fn simulate_received(
    s: &SignatureMatrix,
    truth: &TruthAssignment,
    cfg: &SystemConfig,
    rng: &mut ChaCha8Rng,
) -> Result<ReceivedSignal, ModelError> {
    if s.seq_len() != cfg.l || s.n_devices() != cfg.n || s.q() != cfg.q {
        return Err(ModelError::DimensionMismatch(
            "signature matrix does not match config".into(),
        ));
    }
    if truth.n_devices() != cfg.n || truth.q() != cfg.q {
        return Err(ModelError::DimensionMismatch(
            "truth assignment does not match config".into(),
        ));
    }
    let noise_scale = cfg.sigma_w_sq.sqrt();
    let mut y = CMatrix::from_fn(cfg.l, cfg.m, |_, _| {
        complex_standard_normal(rng) * noise_scale
    });
    for (dev, sel) in truth.selected().iter().enumerate() {
        let Some(seq) = *sel else { continue };
        let amp = cfg.gain.of_device(dev).sqrt();
        let h = crate::CVector::from_fn(cfg.m, |_, _| complex_standard_normal(rng));
        let col = s.column(dev * cfg.q + seq);
        // y += amp * col * h^T (unconjugated outer product)
        for m_idx in 0..cfg.m {
            let w = h[m_idx] * amp;
            for l_idx in 0..cfg.l {
                y[(l_idx, m_idx)] += col[l_idx] * w;
            }
        }
    }
    Ok(ReceivedSignal { y })
}

/// Y Y^H / M, symmetrized to suppress rounding asymmetry.
pub fn sample_covariance(y: &ReceivedSignal) -> SampleCovariance {
    let m = y.y.ncols() as f64;
    let mut sigma_hat = &y.y * y.y.adjoint() / Complex::new(m, 0.0);
    let adj = sigma_hat.adjoint();
    sigma_hat += adj;
    sigma_hat *= Complex::new(0.5, 0.0);
    SampleCovariance { sigma_hat }
}

/// Converts a link budget into the normalized (gain, noise variance) pair.
///
/// The noise power is `noise_psd_dbm_hz + 10 log10(bandwidth_hz)`; both
/// outputs are normalized by the transmit power. The path-loss value is
/// caller-supplied; see [`pathloss_db_at_km`] for the default model.
pub fn gain_from_link_budget(
    tx_power_dbm: f64,
    noise_psd_dbm_hz: f64,
    bandwidth_hz: f64,
    pathloss_db: f64,
) -> (f64, f64) {
    assert!(bandwidth_hz > 0.0, "bandwidth must be positive");
    let noise_power_dbm = noise_psd_dbm_hz + 10.0 * bandwidth_hz.log10();
    let sigma_w_sq = 10f64.powf((noise_power_dbm - tx_power_dbm) / 10.0);
    let g = 10f64.powf(-pathloss_db / 10.0);
    (g, sigma_w_sq)
}

/// Default cellular path-loss model 128.1 + 37.6 log10(d_km).
pub fn pathloss_db_at_km(d_km: f64) -> f64 {
    128.1 + 37.6 * d_km.log10()
}

/// A fully generated problem instance.
#[derive(Debug, Clone)]
pub struct Instance {
    pub config: SystemConfig,
    pub signatures: SignatureMatrix,
    pub truth: TruthAssignment,
    pub sample_cov: SampleCovariance,
}

/// Generates a complete instance from the config's master seed, drawing
/// signatures, activity, channels, and noise from independent streams.
pub fn generate_instance(cfg: &SystemConfig) -> Result<Instance, ModelError> {
    cfg.validate()?;
    let mut sig_rng = rng_stream(cfg.seed, RngPurpose::Signatures);
    let mut act_rng = rng_stream(cfg.seed, RngPurpose::Activity);
    let mut chan_rng = rng_stream(cfg.seed, RngPurpose::Channel);
    let signatures = generate_signatures(cfg, &mut sig_rng);
    let truth = sample_activity(cfg, &mut act_rng)?;
    let y = simulate_received(&signatures, &truth, cfg, &mut chan_rng)?;
    let sample_cov = sample_covariance(&y);
    Ok(Instance {
        config: cfg.clone(),
        signatures,
        truth,
        sample_cov,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(n: usize, q: usize, l: usize, m: usize, k: usize, seed: u64) -> SystemConfig {
        SystemConfig {
            n,
            q,
            l,
            m,
            k,
            sigma_w_sq: 1.0,
            gain: Gain::Uniform(1.0),
            seed,
        }
    }

    #[test]
    fn signature_dimensions_and_column_power() {
        let c = cfg(1000, 2, 150, 1, 0, 7);
        let mut rng = rng_stream(c.seed, RngPurpose::Signatures);
        let s = generate_signatures(&c, &mut rng);
        assert_eq!(s.seq_len(), 150);
        assert_eq!(s.n_sequences(), 2000);
        // Per-column squared norm has mean L and std dev sqrt(L) (sum of
        // L unit-mean exponentials); the average over all columns has a
        // std error of sqrt(L / NQ).
        let mean_sq: f64 = (0..s.n_sequences())
            .map(|j| s.column(j).norm_squared())
            .sum::<f64>()
            / s.n_sequences() as f64;
        let std_err = (150.0f64 / 2000.0).sqrt();
        assert!(
            (mean_sq - 150.0).abs() < 4.0 * std_err,
            "mean column power {mean_sq} too far from L"
        );
    }

    #[test]
    fn smallest_instance_is_finite() {
        let c = cfg(1, 1, 1, 1, 0, 1);
        let mut rng = rng_stream(c.seed, RngPurpose::Signatures);
        let s = generate_signatures(&c, &mut rng);
        assert_eq!((s.seq_len(), s.n_sequences()), (1, 1));
        assert!(s.column(0)[0].norm().is_finite());
    }

    #[test]
    fn signatures_deterministic_for_seed() {
        let c = cfg(5, 2, 4, 1, 0, 42);
        let a = generate_signatures(&c, &mut rng_stream(c.seed, RngPurpose::Signatures));
        let b = generate_signatures(&c, &mut rng_stream(c.seed, RngPurpose::Signatures));
        assert_eq!(a, b);
    }

    #[test]
    fn activity_none_active() {
        let c = cfg(10, 2, 4, 1, 0, 3);
        let t = sample_activity(&c, &mut rng_stream(c.seed, RngPurpose::Activity)).unwrap();
        assert_eq!(t.active_count(), 0);
        assert!(t.gamma_true().values().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn activity_all_active_single_sequence() {
        let c = cfg(10, 1, 4, 1, 10, 3);
        let t = sample_activity(&c, &mut rng_stream(c.seed, RngPurpose::Activity)).unwrap();
        assert_eq!(t.active_count(), 10);
        for dev in 0..10 {
            assert!(t.chi(dev, 0));
        }
    }

    #[test]
    fn activity_rejects_k_above_n() {
        let c = cfg(5, 2, 4, 1, 6, 3);
        assert!(sample_activity(&c, &mut rng_stream(0, RngPurpose::Activity)).is_err());
    }

    #[test]
    fn activity_counts_and_sequence_split() {
        // Chi-square test on the sequence choice over 500 seeded draws.
        let mut counts = [0usize; 2];
        for seed in 0..500 {
            let c = cfg(1000, 2, 4, 1, 100, seed);
            let t = sample_activity(&c, &mut rng_stream(seed, RngPurpose::Activity)).unwrap();
            assert_eq!(t.gamma_true().support().count(), 100);
            for sel in t.selected().iter().flatten() {
                counts[*sel] += 1;
            }
        }
        let total = (counts[0] + counts[1]) as f64;
        let expected = total / 2.0;
        let chi2 = counts
            .iter()
            .map(|c| (*c as f64 - expected).powi(2) / expected)
            .sum::<f64>();
        // 1 dof, 99.9% quantile is 10.83
        assert!(chi2 < 10.83, "chi2 = {chi2}, counts = {counts:?}");
    }

    #[test]
    fn received_is_noise_when_inactive() {
        let mut c = cfg(4, 2, 6, 3, 0, 9);
        c.sigma_w_sq = 1e-12;
        let s = generate_signatures(&c, &mut rng_stream(c.seed, RngPurpose::Signatures));
        let t = sample_activity(&c, &mut rng_stream(c.seed, RngPurpose::Activity)).unwrap();
        let y = simulate_received(&s, &t, &c, &mut rng_stream(c.seed, RngPurpose::Channel))
            .unwrap();
        assert!(y.y.norm() < 1e-4);
    }

    #[test]
    fn received_rank_one_when_single_device_noiseless() {
        let mut c = cfg(3, 2, 8, 5, 1, 11);
        c.sigma_w_sq = 1e-300; // noiseless variant for this test only
        let s = generate_signatures(&c, &mut rng_stream(c.seed, RngPurpose::Signatures));
        let t = sample_activity(&c, &mut rng_stream(c.seed, RngPurpose::Activity)).unwrap();
        let y = simulate_received(&s, &t, &c, &mut rng_stream(c.seed, RngPurpose::Channel))
            .unwrap();
        let idx = t.support()[0];
        let col = s.column(idx);
        for m_idx in 0..c.m {
            let ycol = y.y.column(m_idx);
            // ycol = alpha * col for some complex alpha
            let alpha = col.dotc(&ycol) / col.norm_squared();
            let resid = (ycol - col * alpha).norm();
            assert!(resid < 1e-10 * ycol.norm().max(1.0));
        }
    }

    #[test]
    fn received_energy_matches_expectation() {
        // E||Y||_F^2 = M (sum gamma ||s||^2 + L sigma^2), averaged over
        // 100 channel/noise seeds with a fixed instance geometry.
        let c = cfg(20, 2, 16, 256, 4, 17);
        let s = generate_signatures(&c, &mut rng_stream(c.seed, RngPurpose::Signatures));
        let t = sample_activity(&c, &mut rng_stream(c.seed, RngPurpose::Activity)).unwrap();
        let expected_per_col: f64 = t
            .gamma_true()
            .support()
            .map(|(i, g)| g * s.column(i).norm_squared())
            .sum::<f64>()
            + c.l as f64 * c.sigma_w_sq;
        let expected = c.m as f64 * expected_per_col;
        let trials = 100;
        let mut samples = Vec::with_capacity(trials);
        for seed in 0..trials as u64 {
            let y =
                simulate_received(&s, &t, &c, &mut rng_stream(seed, RngPurpose::Channel))
                    .unwrap();
            samples.push(y.y.norm_squared());
        }
        let mean = samples.iter().sum::<f64>() / trials as f64;
        let var = samples
            .iter()
            .map(|x| (x - mean).powi(2))
            .sum::<f64>()
            / (trials - 1) as f64;
        let std_err = (var / trials as f64).sqrt();
        assert!(
            (mean - expected).abs() < 3.0 * std_err,
            "mean {mean}, expected {expected}, std_err {std_err}"
        );
    }

    #[test]
    fn sample_covariance_of_identity() {
        let y = ReceivedSignal {
            y: CMatrix::identity(2, 2),
        };
        let cov = sample_covariance(&y);
        assert_eq!(cov.sigma_hat[(0, 0)].re, 0.5);
        assert_eq!(cov.sigma_hat[(1, 1)].re, 0.5);
        assert_eq!(cov.sigma_hat[(0, 1)].norm(), 0.0);
    }

    #[test]
    fn sample_covariance_rank_one_for_single_antenna() {
        let y = ReceivedSignal {
            y: CMatrix::from_row_slice(
                3,
                1,
                &[
                    Complex::new(1.0, 2.0),
                    Complex::new(-1.0, 0.5),
                    Complex::new(0.0, -3.0),
                ],
            ),
        };
        let cov = sample_covariance(&y);
        let expected = &y.y * y.y.adjoint();
        assert!((cov.sigma_hat.clone() - expected).norm() < 1e-12);
        let svd = cov.sigma_hat.clone().svd(false, false);
        assert!(svd.singular_values[1] < 1e-12 * svd.singular_values[0]);
    }

    #[test]
    fn sample_covariance_is_psd() {
        let c = cfg(10, 2, 8, 12, 3, 23);
        let inst = generate_instance(&c).unwrap();
        let sigma = &inst.sample_cov.sigma_hat;
        let eig = sigma
            .clone()
            .hermitian_part()
            .symmetric_eigen()
            .eigenvalues;
        let floor = -1e-10 * sigma.norm();
        assert!(eig.iter().all(|e| *e >= floor), "eigenvalues {eig:?}");
    }

    #[test]
    fn covariance_converges_with_antennas() {
        // ||Sigma_hat - Sigma(gamma)||_F / ||.||_F decreases as M grows.
        let mut rel_errs = Vec::new();
        for m in [16usize, 256, 4096] {
            let c = cfg(10, 2, 12, m, 3, 31);
            let inst = generate_instance(&c).unwrap();
            let mut sigma = CMatrix::identity(c.l, c.l) * Complex::new(c.sigma_w_sq, 0.0);
            for (i, g) in inst.truth.gamma_true().support() {
                let col = inst.signatures.column(i).clone_owned();
                sigma.gerc(Complex::new(g, 0.0), &col, &col, Complex::new(1.0, 0.0));
            }
            let rel = (inst.sample_cov.sigma_hat.clone() - &sigma).norm() / sigma.norm();
            rel_errs.push(rel);
        }
        assert!(rel_errs[0] > rel_errs[1] && rel_errs[1] > rel_errs[2], "{rel_errs:?}");
    }

    #[test]
    fn link_budget_paper_values() {
        // -169 dBm/Hz over 10 MHz -> -99 dBm noise power; with 25 dBm
        // transmit power and no path loss, sigma_w_sq = 10^(-12.4).
        let (g, sw) = gain_from_link_budget(25.0, -169.0, 1e7, 0.0);
        assert!((g - 1.0).abs() < 1e-12);
        assert!((sw.log10() + 12.4).abs() < 1e-12);
        let pl = pathloss_db_at_km(1.0);
        assert!((pl - 128.1).abs() < 1e-12);
        let (g1km, _) = gain_from_link_budget(25.0, -169.0, 1e7, pl);
        assert!((g1km.log10() + 12.81).abs() < 1e-12);
    }

    #[test]
    fn instance_generation_is_deterministic() {
        let c = cfg(12, 2, 8, 6, 4, 77);
        let a = generate_instance(&c).unwrap();
        let b = generate_instance(&c).unwrap();
        assert_eq!(a.signatures, b.signatures);
        assert_eq!(a.truth, b.truth);
        assert_eq!(a.sample_cov, b.sample_cov);
    }
}
