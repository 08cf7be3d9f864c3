//! QPSK over per-symbol Rayleigh fading with two-state Markov-Gaussian
//! impulsive noise: `y_i = h_i x_i + n_i`.
//!
//! The noise variance switches between `σ_w²` (GOOD) and `σ_v² = R·σ_w²`
//! (BAD) under a first-order Markov chain parameterised by the stationary
//! impulse probability `p` and the channel memory `Γ = 1/(p_GB + p_BG)`.

use num_complex::Complex64;
use rand::Rng as _;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{derive_seed, rng_from_seed};

const TAG_SYMBOLS: u64 = 1;
const TAG_FADING: u64 = 2;
const TAG_STATES: u64 = 3;
const TAG_NOISE: u64 = 4;

/// Ground-truth impulsive noise parameters plus the background variance.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseSpec {
    /// Stationary probability of the impulsive (BAD) state.
    pub p: f64,
    /// Impulsive-to-Gaussian power ratio, linear.
    pub r: f64,
    /// Channel memory.
    pub gamma: f64,
    /// Background Gaussian noise variance.
    pub sigma_w2: f64,
}

impl NoiseSpec {
    pub fn new(p: f64, r: f64, gamma: f64, sigma_w2: f64) -> Result<Self> {
        let spec = NoiseSpec {
            p,
            r,
            gamma,
            sigma_w2,
        };
        spec.validate()?;
        Ok(spec)
    }

    /// Build a spec whose background variance realises `snr_db` for unit-energy symbols.
    pub fn at_snr(p: f64, r: f64, gamma: f64, snr_db: f64, reference: SnrReference) -> Result<Self> {
        let sigma_w2 = background_variance(snr_db, 1.0, p, r, reference)?;
        Self::new(p, r, gamma, sigma_w2)
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.p) {
            return Err(Error::Domain(format!("p = {} outside [0, 1]", self.p)));
        }
        if !(self.r > 0.0 && self.r.is_finite()) {
            return Err(Error::Domain(format!("R = {} must be positive", self.r)));
        }
        if !(self.gamma > 0.0 && self.gamma.is_finite()) {
            return Err(Error::Domain(format!("Γ = {} must be positive", self.gamma)));
        }
        if !(self.sigma_w2 > 0.0 && self.sigma_w2.is_finite()) {
            return Err(Error::Domain(format!("σ_w² = {} must be positive", self.sigma_w2)));
        }
        Ok(())
    }

    /// Impulsive-state variance `R·σ_w²`.
    pub fn sigma_v2(&self) -> f64 {
        self.r * self.sigma_w2
    }

    /// Mean noise power over the stationary chain.
    pub fn mean_noise_power(&self) -> f64 {
        self.sigma_w2 * (1.0 - self.p + self.p * self.r)
    }
}

/// Markov transition probabilities between the GOOD and BAD states.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TransitionModel {
    pub p_gb: f64,
    pub p_bg: f64,
}

impl TransitionModel {
    pub fn new(p_gb: f64, p_bg: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&p_gb) || !(0.0..=1.0).contains(&p_bg) {
            return Err(Error::Domain(format!(
                "transition probabilities ({p_gb}, {p_bg}) outside [0, 1]"
            )));
        }
        if p_gb + p_bg <= 0.0 {
            return Err(Error::Domain("absorbing chain: p_gb = p_bg = 0".into()));
        }
        Ok(TransitionModel { p_gb, p_bg })
    }

    pub fn memory(&self) -> f64 {
        1.0 / (self.p_gb + self.p_bg)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum State {
    Good,
    Bad,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StateSequence(pub Vec<State>);

impl StateSequence {
    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn bad_fraction(&self) -> f64 {
        self.0.iter().filter(|s| **s == State::Bad).count() as f64 / self.0.len() as f64
    }

    /// Empirical `(p̂_GB, p̂_BG)` from consecutive-pair counts.
    ///
    /// A state never left (or never visited) yields an estimate of zero.
    pub fn empirical_transitions(&self) -> (f64, f64) {
        let mut from_good = 0usize;
        let mut from_bad = 0usize;
        let mut gb = 0usize;
        let mut bg = 0usize;
        for w in self.0.windows(2) {
            match (w[0], w[1]) {
                (State::Good, next) => {
                    from_good += 1;
                    gb += usize::from(next == State::Bad);
                }
                (State::Bad, next) => {
                    from_bad += 1;
                    bg += usize::from(next == State::Good);
                }
            }
        }
        let ratio = |n: usize, d: usize| if d == 0 { 0.0 } else { n as f64 / d as f64 };
        (ratio(gb, from_good), ratio(bg, from_bad))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ComplexSequence(pub Vec<Complex64>);

impl ComplexSequence {
    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn mean_power(&self) -> f64 {
        self.0.iter().map(|z| z.norm_sqr()).sum::<f64>() / self.0.len() as f64
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|z| z.re.is_finite() && z.im.is_finite())
    }
}

/// Distribution of the fading gain.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FadingKind {
    /// Circularly-symmetric CN(0, 1): Rayleigh envelope.
    #[default]
    Complex,
    /// Real N(0, 1) gain.
    Real,
}

/// Transmitted symbol source.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SymbolSource {
    #[default]
    Qpsk,
    /// Unit-power complex Gaussian symbols.
    Gaussian,
}

/// Which noise power the SNR is quoted against.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SnrReference {
    /// Background Gaussian power `σ_w²`.
    #[default]
    Background,
    /// Stationary mean noise power `σ_w²(1 − p + pR)`.
    Total,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ChannelOptions {
    pub fading: FadingKind,
    pub source: SymbolSource,
    pub snr_ref: SnrReference,
}

/// Solve `p_B = p` and `Γ = 1/(p_GB + p_BG)` for the transition probabilities.
pub fn derive_transitions(spec: &NoiseSpec) -> Result<TransitionModel> {
    let p_gb = spec.p / spec.gamma;
    let p_bg = (1.0 - spec.p) / spec.gamma;
    if p_gb > 1.0 {
        return Err(Error::Domain(format!(
            "infeasible (p={}, Γ={}): p/Γ = {p_gb} exceeds 1",
            spec.p, spec.gamma
        )));
    }
    if p_bg > 1.0 {
        return Err(Error::Domain(format!(
            "infeasible (p={}, Γ={}): (1-p)/Γ = {p_bg} exceeds 1",
            spec.p, spec.gamma
        )));
    }
    TransitionModel::new(p_gb, p_bg)
}

/// Long-run occupancy `(p_G, p_B)`.
pub fn stationary_distribution(tm: &TransitionModel) -> Result<(f64, f64)> {
    let total = tm.p_gb + tm.p_bg;
    if total <= 0.0 {
        return Err(Error::Domain("absorbing chain has no unique stationary law".into()));
    }
    Ok((tm.p_bg / total, tm.p_gb / total))
}

pub fn sample_state_chain(tm: &TransitionModel, len: usize, seed: u64) -> Result<StateSequence> {
    if len == 0 {
        return Err(Error::Domain("state chain length must be at least 1".into()));
    }
    let (_, p_bad) = stationary_distribution(tm)?;
    let mut rng = rng_from_seed(seed);
    let mut states = Vec::with_capacity(len);
    let mut current = if rng.random::<f64>() < p_bad {
        State::Bad
    } else {
        State::Good
    };
    states.push(current);
    for _ in 1..len {
        let u: f64 = rng.random();
        current = match current {
            State::Good if u < tm.p_gb => State::Bad,
            State::Bad if u < tm.p_bg => State::Good,
            s => s,
        };
        states.push(current);
    }
    Ok(StateSequence(states))
}

#[inline]
fn complex_gaussian(rng: &mut crate::rng::Rng, variance: f64) -> Complex64 {
    let scale = (variance / 2.0).sqrt();
    let re: f64 = rng.sample(StandardNormal);
    let im: f64 = rng.sample(StandardNormal);
    Complex64::new(re * scale, im * scale)
}

/// Draw state-conditioned circular Gaussian noise.
pub fn sample_noise(states: &StateSequence, spec: &NoiseSpec, seed: u64) -> Result<ComplexSequence> {
    if states.is_empty() {
        return Err(Error::Domain("cannot sample noise for an empty state sequence".into()));
    }
    let mut rng = rng_from_seed(seed);
    let good = spec.sigma_w2;
    let bad = spec.sigma_v2();
    let samples = states
        .0
        .iter()
        .map(|s| {
            let var = match s {
                State::Good => good,
                State::Bad => bad,
            };
            complex_gaussian(&mut rng, var)
        })
        .collect();
    Ok(ComplexSequence(samples))
}

/// Uniform QPSK symbols `(±1 ± j)/√2`.
pub fn modulate_qpsk(len: usize, seed: u64) -> Result<ComplexSequence> {
    if len == 0 {
        return Err(Error::Domain("symbol count must be at least 1".into()));
    }
    let a = std::f64::consts::FRAC_1_SQRT_2;
    let mut rng = rng_from_seed(seed);
    let samples = (0..len)
        .map(|_| {
            let bits: u8 = rng.random_range(0..4);
            let re = if bits & 1 == 0 { a } else { -a };
            let im = if bits & 2 == 0 { a } else { -a };
            Complex64::new(re, im)
        })
        .collect();
    Ok(ComplexSequence(samples))
}

fn gaussian_symbols(len: usize, seed: u64) -> Result<ComplexSequence> {
    if len == 0 {
        return Err(Error::Domain("symbol count must be at least 1".into()));
    }
    let mut rng = rng_from_seed(seed);
    Ok(ComplexSequence(
        (0..len).map(|_| complex_gaussian(&mut rng, 1.0)).collect(),
    ))
}

/// I.i.d. unit-power Rayleigh gains.
pub fn sample_fading(len: usize, seed: u64) -> Result<ComplexSequence> {
    sample_fading_with(len, seed, FadingKind::Complex)
}

pub fn sample_fading_with(len: usize, seed: u64, kind: FadingKind) -> Result<ComplexSequence> {
    if len == 0 {
        return Err(Error::Domain("fading length must be at least 1".into()));
    }
    let mut rng = rng_from_seed(seed);
    let samples = match kind {
        FadingKind::Complex => (0..len).map(|_| complex_gaussian(&mut rng, 1.0)).collect(),
        FadingKind::Real => (0..len)
            .map(|_| Complex64::new(rng.sample(StandardNormal), 0.0))
            .collect(),
    };
    Ok(ComplexSequence(samples))
}

/// `σ_w² = E_s / 10^(snr/10)`.
pub fn snr_to_noise_variance(snr_db: f64, symbol_energy: f64) -> f64 {
    symbol_energy / 10f64.powf(snr_db / 10.0)
}

/// Background variance for the chosen SNR reference.
pub fn background_variance(
    snr_db: f64,
    symbol_energy: f64,
    p: f64,
    r: f64,
    reference: SnrReference,
) -> Result<f64> {
    if !(symbol_energy > 0.0) {
        return Err(Error::Domain(format!("symbol energy {symbol_energy} must be positive")));
    }
    let total = snr_to_noise_variance(snr_db, symbol_energy);
    Ok(match reference {
        SnrReference::Background => total,
        SnrReference::Total => total / (1.0 - p + p * r),
    })
}

/// A received block together with its hidden states.
#[derive(Debug, Clone, PartialEq)]
pub struct Received {
    pub y: ComplexSequence,
    pub states: StateSequence,
}

/// Compose `y = h·x + n` from independently seeded components.
pub fn received_sequence(
    spec: &NoiseSpec,
    len: usize,
    seed: u64,
    opts: &ChannelOptions,
) -> Result<Received> {
    spec.validate()?;
    let tm = derive_transitions(spec)?;
    let x = match opts.source {
        SymbolSource::Qpsk => modulate_qpsk(len, derive_seed(seed, &[TAG_SYMBOLS]))?,
        SymbolSource::Gaussian => gaussian_symbols(len, derive_seed(seed, &[TAG_SYMBOLS]))?,
    };
    let h = sample_fading_with(len, derive_seed(seed, &[TAG_FADING]), opts.fading)?;
    let states = sample_state_chain(&tm, len, derive_seed(seed, &[TAG_STATES]))?;
    let n = sample_noise(&states, spec, derive_seed(seed, &[TAG_NOISE]))?;
    let y = x
        .0
        .iter()
        .zip(&h.0)
        .zip(&n.0)
        .map(|((x, h), n)| h * x + n)
        .collect();
    Ok(Received {
        y: ComplexSequence(y),
        states,
    })
}
