//! A-priori parameter selection: from a target accuracy `ε` to `(L, M, h)`.
//!
//! Every threshold is the least integer satisfying a closed inequality and is
//! found by exponential stepping followed by bisection on a predicate
//! evaluated in log space.

use serde::{Deserialize, Serialize};

use crate::calibration::Calibration;
use crate::error::{Error, Result};
use crate::field::{DistinctBrownian, EigenSequence};
use crate::study::StudyRow;

/// Spectral and regularity data the planner needs about the covariance.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SpectralProfile {
    pub dim: usize,
    /// Spatial smoothness `s`.
    pub s: f64,
    /// Decay exponent of the covariance class.
    pub alpha: f64,
    /// Growth exponent with `L^{1/2} + G(L) ≲ L^γ`; at least 1/2.
    pub gamma: f64,
    /// Exponent trading `ln(1/h)^{1/2}` for `h^{−β}`.
    pub beta: f64,
    #[serde(default)]
    pub calibration: Calibration,
    /// Largest mass-matrix eigenvalue after normalization.
    #[serde(default = "one")]
    pub lambda_max_mass: f64,
}

fn one() -> f64 {
    1.0
}

impl SpectralProfile {
    /// Brownian motion (`dim = 1`) or sheet (`dim = 2`) with `s = 1/2 − 10⁻³`,
    /// `α = 1`, `γ = 3/2`, `β = 0.1`.
    pub fn brownian(dim: usize) -> Self {
        SpectralProfile {
            dim,
            s: 0.5 - 1e-3,
            alpha: 1.0,
            gamma: 1.5,
            beta: 0.1,
            calibration: Calibration::default(),
            lambda_max_mass: 1.0,
        }
    }

    pub fn sequence(&self) -> DistinctBrownian {
        DistinctBrownian { dim: self.dim }
    }

    pub fn validate(&self) -> Result<()> {
        if self.dim != 1 && self.dim != 2 {
            return Err(Error::invalid(format!("profile.dim must be 1 or 2, got {}", self.dim)));
        }
        if !(self.gamma >= 0.5) {
            return Err(Error::invalid(format!("profile.gamma must be at least 0.5, got {}", self.gamma)));
        }
        for (name, v) in [("s", self.s), ("alpha", self.alpha), ("beta", self.beta), ("lambda_max_mass", self.lambda_max_mass)] {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::invalid(format!("profile.{name} must be positive, got {v}")));
            }
        }
        self.calibration.validate()
    }

    /// `1 / (2α + 1)`.
    fn p(&self) -> f64 {
        1.0 / (2.0 * self.alpha + 1.0)
    }
}

/// `(Σ_{ℓ≤L} (λ_ℓ/δ_ℓ)²)^{1/2}`.
pub fn g_of_l(seq: &dyn EigenSequence, l: usize) -> Result<f64> {
    if l == 0 {
        return Err(Error::invalid("truncation must be at least 1"));
    }
    let mut s = 0.0;
    for k in 1..=l {
        let gap = seq.gap(k);
        if !(gap > 0.0) {
            return Err(Error::DegenerateSpectrum(format!("gap {k} is {gap}")));
        }
        s += (seq.eigenvalue(k) / gap).powi(2);
    }
    Ok(s.sqrt())
}

/// `(min_{ℓ≤L} δ_ℓ / 48)²`.
pub fn h_of_l(seq: &dyn EigenSequence, l: usize) -> Result<f64> {
    if l == 0 {
        return Err(Error::invalid("truncation must be at least 1"));
    }
    let mut m = f64::INFINITY;
    for k in 1..=l {
        let gap = seq.gap(k);
        if !(gap > 0.0) {
            return Err(Error::DegenerateSpectrum(format!("gap {k} is {gap}")));
        }
        m = m.min(gap);
    }
    Ok((m / 48.0).powi(2))
}

/// `1 − 2 Q 5^τ exp(−M ρ₁ H / λ_max²)`, clamped to `[0, 1]`.
pub fn p0_bound(q_h: usize, tau: usize, m: f64, rho1: f64, h_of_l: f64, lambda_max: f64) -> f64 {
    let log_fail = std::f64::consts::LN_2 + (q_h as f64).ln() + tau as f64 * 5f64.ln()
        - m * rho1 * h_of_l / (lambda_max * lambda_max);
    (-log_fail.exp_m1()).clamp(0.0, 1.0)
}

/// Result of the spectral-gap condition for every `ℓ ≤ L`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GapBudget {
    pub g_of_l: f64,
    pub h_of_l: f64,
    pub p0: Option<f64>,
    /// `δ_ℓ − 4 C₁ h^{2s} / λ_{ℓ+1} − 4 ‖S̃ − S̃^M‖`.
    pub margins: Vec<f64>,
    pub ok: bool,
}

pub fn check_gap_condition(profile: &SpectralProfile, l: usize, h: f64, diff_norm: f64) -> Result<GapBudget> {
    if !(h > 0.0 && h <= profile.calibration.h0) {
        return Err(Error::invalid(format!("mesh width {h} must lie in (0, {}]", profile.calibration.h0)));
    }
    let seq = profile.sequence();
    let h2s = h.powf(2.0 * profile.s);
    let margins: Vec<f64> = (1..=l)
        .map(|k| seq.gap(k) - 4.0 * profile.calibration.c1 * h2s / seq.eigenvalue(k + 1) - 4.0 * diff_norm)
        .collect();
    Ok(GapBudget {
        g_of_l: g_of_l(&seq, l)?,
        h_of_l: h_of_l(&seq, l)?,
        p0: None,
        ok: margins.iter().all(|m| *m >= 0.0),
        margins,
    })
}

/// Regime of the rate function the plan is built for.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Regime {
    /// `Q_h < M^{1/(2α+1)}`.
    SmallQh,
    /// `Q_h ≥ M^{1/(2α+1)}` with the logarithmic term dominating.
    LargeQhLogDominated,
    /// `Q_h ≥ M^{1/(2α+1)}` with the power term dominating.
    LargeQhRateDominated,
}

impl Regime {
    pub const ALL: [Regime; 3] = [Regime::SmallQh, Regime::LargeQhLogDominated, Regime::LargeQhRateDominated];

    /// Case number 1, 2 or 3.
    pub fn number(self) -> u8 {
        match self {
            Regime::SmallQh => 1,
            Regime::LargeQhLogDominated => 2,
            Regime::LargeQhRateDominated => 3,
        }
    }

    pub fn from_number(n: u8) -> Result<Self> {
        match n {
            1 => Ok(Regime::SmallQh),
            2 => Ok(Regime::LargeQhLogDominated),
            3 => Ok(Regime::LargeQhRateDominated),
            _ => Err(Error::invalid(format!("regime must be 1, 2 or 3, got {n}"))),
        }
    }
}

/// Integer thresholds computed for a plan; absent when the case does not use one.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Thresholds {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub m_bar: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub m_tilde: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub m_hat: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub m_prime: Option<u64>,
    /// Real root behind `m_tilde` from the product logarithm.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub m_tilde_lambert: Option<f64>,
}

/// Planned discretization for one accuracy target.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlanResult {
    pub epsilon: f64,
    pub regime: Regime,
    pub l_eps: usize,
    /// Sample count; integer valued.
    pub m_eps: f64,
    pub h_eps: f64,
    pub h_lower: f64,
    pub h_upper: f64,
    /// Natural logs of the interval ends; finite even when the ends underflow.
    pub ln_h_lower: f64,
    pub ln_h_upper: f64,
    pub thresholds: Thresholds,
    pub feasible: bool,
    pub reason: String,
    /// Which term attains the maximum for `M` and the minimum for `h`.
    pub binding: Vec<String>,
    pub g_of_l: f64,
    pub h_of_l: f64,
    pub notes: Vec<String>,
}

/// Largest sample count the searches consider; integers stay exact in `f64`.
pub const SEARCH_LIMIT: u64 = 1 << 53;

/// Least `M ≥ 1` with `pred(M)`, assuming the failing set is an initial segment.
/// `None` when no `M ≤ 2^53` qualifies.
pub fn integer_threshold(pred: impl Fn(f64) -> bool) -> Option<u64> {
    const LIMIT: u64 = SEARCH_LIMIT;
    if pred(1.0) {
        return Some(1);
    }
    let (mut lo, mut hi) = (1u64, 2u64);
    while !pred(hi as f64) {
        lo = hi;
        hi = hi.checked_mul(2).filter(|v| *v <= LIMIT)?;
    }
    while hi - lo > 1 {
        let mid = lo + (hi - lo) / 2;
        if pred(mid as f64) {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    Some(hi)
}

/// Lower branch `W₋₁(z)` of the product logarithm for `z ∈ [−1/e, 0)`,
/// solving `ln(−w) + w = ln(−z)` on `w ≤ −1` by bisection.
pub fn lambert_w_m1(z: f64) -> Option<f64> {
    let target = (-z).ln();
    if !(z < 0.0) || target > -1.0 + 1e-15 {
        return None;
    }
    let g = |w: f64| (-w).ln() + w;
    let mut lo = target.min(-1.0) * 2.0 - 1.0;
    while g(lo) > target {
        lo *= 2.0;
    }
    let mut hi = -1.0;
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if g(mid) > target {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    Some(0.5 * (lo + hi))
}

/// `⌈ε^{−2d/(4s+d)}⌉`, snapping values within `1e-9` relative of an integer.
pub fn l_epsilon(eps: f64, s: f64, d: usize) -> usize {
    let d = d as f64;
    let raw = eps.powf(-2.0 * d / (4.0 * s + d));
    let near = raw.round();
    if (raw - near).abs() <= 1e-9 * raw {
        near as usize
    } else {
        raw.ceil() as usize
    }
}

struct Ingredients {
    l: usize,
    ln_eps: f64,
    /// `ρ₁ H(L) / λ_max²`.
    c: f64,
    h_up: f64,
    h_up_term: &'static str,
    g: f64,
    h_of_l: f64,
}

fn ingredients(profile: &SpectralProfile, eps: f64) -> Result<Ingredients> {
    let seq = profile.sequence();
    let l = l_epsilon(eps, profile.s, profile.dim);
    let h_of_l = h_of_l(&seq, l)?;
    let g = g_of_l(&seq, l)?;
    let s = profile.s;
    let gap_term = h_of_l.powf(1.0 / (4.0 * s)) * seq.eigenvalue(l + 1).powf(1.0 / (2.0 * s));
    let eig_term = seq.eigenvalue(l).powf(1.0 / s);
    let (h_up, h_up_term) = if gap_term <= eig_term {
        (gap_term, "H(L)^(1/4s) lambda_(L+1)^(1/2s)")
    } else {
        (eig_term, "lambda_L^(1/s)")
    };
    let lm = profile.lambda_max_mass;
    Ok(Ingredients { l, ln_eps: eps.ln(), c: profile.calibration.rho1 * h_of_l / (lm * lm), h_up, h_up_term, g, h_of_l })
}

/// `ln(L^{1/2}/ε) − M c + p ln M ≤ 0`, the defining inequality of `M̄` and `M̃`.
fn exp_vs_power(ing: &Ingredients, p: f64) -> impl Fn(f64) -> bool + '_ {
    move |m: f64| 0.5 * (ing.l as f64).ln() - ing.ln_eps - m * ing.c + p * m.ln() <= 0.0
}

/// `ln(L^{1/2}/ε) − M c + M^p ≤ 0`, the defining inequality of `M′`.
fn exp_vs_exp(ing: &Ingredients, p: f64) -> impl Fn(f64) -> bool + '_ {
    move |m: f64| 0.5 * (ing.l as f64).ln() - ing.ln_eps - m * ing.c + m.powf(p) <= 0.0
}

/// `exp(−M^p/d) ≤ M^{−p/d}`, the defining inequality of `M̂`.
fn hat_predicate(p: f64, d: f64) -> impl Fn(f64) -> bool {
    move |m: f64| -m.powf(p) / d <= -p / d * m.ln()
}

fn argmax(terms: &[(&'static str, f64)]) -> (&'static str, f64) {
    terms.iter().copied().fold(("", f64::NEG_INFINITY), |a, b| if b.1 > a.1 { b } else { a })
}

fn argmin(terms: &[(&'static str, f64)]) -> (&'static str, f64) {
    terms.iter().copied().fold(("", f64::INFINITY), |a, b| if b.1 < a.1 { b } else { a })
}

/// A case whose threshold lies beyond [`SEARCH_LIMIT`].
fn out_of_range(eps: f64, regime: Regime, ing: &Ingredients, th: Thresholds, name: &str) -> PlanResult {
    PlanResult {
        epsilon: eps,
        regime,
        l_eps: ing.l,
        m_eps: f64::INFINITY,
        h_eps: f64::NAN,
        h_lower: f64::NAN,
        h_upper: f64::NAN,
        ln_h_lower: f64::NAN,
        ln_h_upper: f64::NAN,
        thresholds: th,
        feasible: false,
        reason: format!("threshold {name} exceeds 2^53 samples"),
        binding: vec![format!("M: {name}")],
        g_of_l: ing.g,
        h_of_l: ing.h_of_l,
        notes: Vec::new(),
    }
}

macro_rules! threshold_or_return {
    ($v:expr, $name:literal, $eps:expr, $regime:expr, $ing:expr, $th:expr) => {
        match $v {
            Some(v) => v,
            None => return Ok(out_of_range($eps, $regime, &$ing, $th, $name)),
        }
    };
}

fn plan_case(profile: &SpectralProfile, eps: f64, regime: Regime) -> Result<PlanResult> {
    let ing = ingredients(profile, eps)?;
    let p = profile.p();
    let d = profile.dim as f64;
    let a = profile.alpha;
    let s = profile.s;
    let l = ing.l as f64;
    let h0 = profile.calibration.h0;
    let ln_l_over_eps = 0.5 * l.ln() - ing.ln_eps;
    let rate_term = eps.powf(-(2.0 * a + 1.0) / a) * l.powf(profile.gamma * (2.0 * a + 1.0) / a);
    let gap_term = ing.h_up.powf(-d * (2.0 * a + 1.0));
    let mut th = Thresholds::default();
    let mut binding = Vec::new();
    let mut notes = Vec::new();

    let (m, ln_lo, ln_hi_terms): (f64, f64, Vec<(&'static str, f64)>) = match regime {
        Regime::SmallQh => {
            let m_bar = threshold_or_return!(integer_threshold(exp_vs_power(&ing, p)), "M_bar", eps, regime, ing, th);
            th.m_bar = Some(m_bar);
            let (which, m) = argmax(&[
                ("M_bar", m_bar as f64),
                ("eps^-(2a+1)/a L^(gamma(2a+1)/a)", rate_term.ceil()),
                ("h_up^-d(2a+1)", gap_term.ceil()),
            ]);
            binding.push(format!("M: {which}"));
            let ln_mesh = -m.ln() / (d * (2.0 * a + 1.0));
            (m, ln_mesh, vec![(ing.h_up_term, ing.h_up.ln()), ("h0", h0.ln())])
        }
        Regime::LargeQhLogDominated => {
            let m_tilde =
                threshold_or_return!(integer_threshold(exp_vs_power(&ing, p)), "M_tilde", eps, regime, ing, th);
            th.m_tilde = Some(m_tilde);
            th.m_tilde_lambert = m_tilde_lambert(&ing, a, eps);
            let expo = (2.0 * (2.0 * s + d) * profile.beta + 2.0 * s * d * profile.gamma) / (s * d);
            let (which, m) = argmax(&[("M_tilde", m_tilde as f64), ("L^(...) eps^-2", (l.powf(expo) / (eps * eps)).ceil())]);
            binding.push(format!("M: {which}"));
            let ln_lower = (ln_l_over_eps - m * ing.c) / d;
            notes.push(
                "log-dominated regime also needs ln(1/h)^(1/2) <= h^-beta and M^(-2a/(2a+1)) <= d ln(1/h)/M; reported, not enforced"
                    .into(),
            );
            (
                m,
                ln_lower,
                vec![(ing.h_up_term, ing.h_up.ln()), ("M^-1/(d(2a+1))", -m.ln() * p / d), ("h0", h0.ln())],
            )
        }
        Regime::LargeQhRateDominated => {
            let m_hat = threshold_or_return!(integer_threshold(hat_predicate(p, d)), "M_hat", eps, regime, ing, th);
            th.m_hat = Some(m_hat);
            let m_prime =
                threshold_or_return!(integer_threshold(exp_vs_exp(&ing, p)), "M_prime", eps, regime, ing, th);
            th.m_prime = Some(m_prime);
            let (which, m) = argmax(&[
                ("M_hat", m_hat as f64),
                ("M_prime", m_prime as f64),
                ("eps^-(2a+1)/a L^(gamma(2a+1)/a)", rate_term.ceil()),
                ("h_up^-d(2a+1)", gap_term.ceil()),
            ]);
            binding.push(format!("M: {which}"));
            let from_gap = (ln_l_over_eps - m * ing.c) / d;
            let from_regime = -m.powf(p) / d;
            let ln_lower = from_gap.max(from_regime);
            (
                m,
                ln_lower,
                vec![(ing.h_up_term, ing.h_up.ln()), ("M^-1/(d(2a+1))", -m.ln() * p / d), ("h0", h0.ln())],
            )
        }
    };
    let (upper_term, ln_hi) = argmin(&ln_hi_terms);
    let (ln_lo, ln_h) = match regime {
        // The mesh is pinned to the regime boundary, capped by h0.
        Regime::SmallQh => {
            let ln_h = ln_lo.min(h0.ln());
            binding.push(if ln_lo <= h0.ln() { "h: M^-1/(d(2a+1))".into() } else { "h: h0".to_string() });
            (ln_lo, ln_h)
        }
        _ => {
            binding.push(format!("h: {upper_term}"));
            (ln_lo, ln_hi)
        }
    };
    let feasible = ln_lo <= ln_hi + 1e-12;
    let reason = if feasible {
        "ok".to_string()
    } else {
        format!("h interval empty: lower bound exp({ln_lo:.6}) exceeds upper bound exp({ln_hi:.6}) set by {upper_term}")
    };
    let h_eps = ln_h.exp();
    let c2_check = profile.calibration.c2 * h_eps.powf(s) / profile.sequence().eigenvalue(ing.l);
    notes.push(format!("C2 h^s / lambda_L = {c2_check:.6e} (needs <= 1; depends on calibration)"));
    if profile.lambda_max_mass == 1.0 {
        notes.push("mass matrix assumed normalized (lambda_max ~ lambda_min ~ 1); a nodal basis has lambda ~ h^d".into());
    }
    Ok(PlanResult {
        epsilon: eps,
        regime,
        l_eps: ing.l,
        m_eps: m,
        h_eps,
        h_lower: ln_lo.exp(),
        h_upper: ln_hi.exp(),
        ln_h_lower: ln_lo,
        ln_h_upper: ln_hi,
        thresholds: th,
        feasible,
        reason,
        binding,
        g_of_l: ing.g,
        h_of_l: ing.h_of_l,
        notes,
    })
}

/// Root of `L^{1/2} ε^{−1} e^{−Mc} = M^{−1/(2α+1)}` on the large-`M` branch.
fn m_tilde_lambert(ing: &Ingredients, alpha: f64, eps: f64) -> Option<f64> {
    let k = 2.0 * alpha + 1.0;
    let ln_z_abs = k.ln() + ing.c.ln() + k * (eps.ln() - 0.5 * (ing.l as f64).ln());
    let z = -ln_z_abs.exp();
    lambert_w_m1(z).map(|w| -w / (k * ing.c))
}

/// The integer searches behind [`Thresholds`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ThresholdKind {
    MBar,
    MTilde,
    MHat,
    MPrime,
}

impl ThresholdKind {
    pub const ALL: [ThresholdKind; 4] =
        [ThresholdKind::MBar, ThresholdKind::MTilde, ThresholdKind::MHat, ThresholdKind::MPrime];

    /// The value a plan reports for this threshold.
    pub fn of(self, th: &Thresholds) -> Option<u64> {
        match self {
            ThresholdKind::MBar => th.m_bar,
            ThresholdKind::MTilde => th.m_tilde,
            ThresholdKind::MHat => th.m_hat,
            ThresholdKind::MPrime => th.m_prime,
        }
    }

    /// The case whose plan carries this threshold.
    pub fn regime(self) -> Regime {
        match self {
            ThresholdKind::MBar => Regime::SmallQh,
            ThresholdKind::MTilde => Regime::LargeQhLogDominated,
            ThresholdKind::MHat | ThresholdKind::MPrime => Regime::LargeQhRateDominated,
        }
    }
}

/// Whether `m` satisfies the defining inequality of `kind` at accuracy `eps`.
pub fn threshold_holds(profile: &SpectralProfile, eps: f64, kind: ThresholdKind, m: f64) -> Result<bool> {
    let ing = ingredients(profile, eps)?;
    let p = profile.p();
    Ok(match kind {
        ThresholdKind::MBar | ThresholdKind::MTilde => exp_vs_power(&ing, p)(m),
        ThresholdKind::MHat => hat_predicate(p, profile.dim as f64)(m),
        ThresholdKind::MPrime => exp_vs_exp(&ing, p)(m),
    })
}

/// Plans for `ε ∈ (0, 1)`; without an override every case is computed and the
/// feasible one with the smallest `M` wins, ties going to the log-dominated case.
pub fn plan(profile: &SpectralProfile, eps: f64, regime: Option<Regime>) -> Result<PlanResult> {
    if !(eps > 0.0 && eps < 1.0) {
        return Err(Error::invalid(format!("epsilon must lie in (0, 1), got {eps}")));
    }
    profile.validate()?;
    if let Some(r) = regime {
        return plan_case(profile, eps, r);
    }
    let mut best: Option<PlanResult> = None;
    for r in [Regime::LargeQhLogDominated, Regime::SmallQh, Regime::LargeQhRateDominated] {
        let Ok(cand) = plan_case(profile, eps, r) else { continue };
        let better = match &best {
            None => true,
            Some(b) => (cand.feasible && !b.feasible) || (cand.feasible == b.feasible && cand.m_eps < b.m_eps),
        };
        if better {
            best = Some(cand);
        }
    }
    best.ok_or_else(|| Error::invalid("no regime produced a plan"))
}

/// Measured accuracy of a study cell against a plan.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PlanCheck {
    pub epsilon: f64,
    pub planned_l: usize,
    pub planned_m: f64,
    pub planned_h: f64,
    pub used_l: usize,
    pub used_m: usize,
    pub used_h: f64,
    pub mean_total: f64,
    pub mean_e3: f64,
    /// `mean_total / ε`, the calibration factor absorbing unnamed constants.
    pub ratio: f64,
    /// The study ran below the planned `M` or above the planned `h`.
    pub capped: bool,
}

pub fn verify_plan(plan: &PlanResult, row: &StudyRow) -> PlanCheck {
    PlanCheck {
        epsilon: plan.epsilon,
        planned_l: plan.l_eps,
        planned_m: plan.m_eps,
        planned_h: plan.h_eps,
        used_l: row.l,
        used_m: row.m,
        used_h: row.h,
        mean_total: row.mean_total,
        mean_e3: row.mean_e3,
        ratio: row.mean_total / plan.epsilon,
        capped: (row.m as f64) < plan.m_eps || row.h > plan.h_eps * (1.0 + 1e-12),
    }
}
