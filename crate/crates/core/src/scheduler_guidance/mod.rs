//! Inference plans and mixed-patch-size classifier-free guidance.
//!
//! A plan assigns every reverse step `t = T..1` a patch size for the
//! conditional branch and, when guided, one for the guidance branch.

mod nfe;

use std::fmt;

use crate::backbone::BackboneError;
use crate::numerics::Tensor;

pub use nfe::{nfe_batch, nfe_pair, NfeStats};

/// Default `(1 - s1) / (1 - s2)`.
pub const DEFAULT_RATIO: f64 = 2.5;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum SchedulerError {
    #[error("inconsistent counts: {0}")]
    InconsistentCounts(String),
    #[error("cannot parse plan {text:?}: {reason}")]
    Parse { text: String, reason: String },
    #[error("conditional patch size {p_cond} is weaker than guidance patch size {p_uncond}")]
    WeakerConditional { p_cond: usize, p_uncond: usize },
    #[error("guidance ratio must be finite and non-zero, got {0}")]
    BadRatio(f64),
    #[error("shape mismatch: {0:?} vs {1:?}")]
    Shape(Vec<usize>, Vec<usize>),
    #[error(transparent)]
    Backbone(#[from] BackboneError),
}

/// Guidance scales for the equal-size (`s_cfg1`) and mixed-size (`s_cfg2`) cases.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GuidanceConfig {
    pub s_cfg1: f64,
    pub s_cfg2: f64,
    pub ratio: f64,
    /// `s_cfg2` was set explicitly instead of derived from the ratio.
    pub s2_override: bool,
}

impl GuidanceConfig {
    /// `s_cfg1 = s`, `s_cfg2 = 1 - (1 - s) / ratio`.
    pub fn from_scale(s: f64, ratio: f64) -> Result<Self, SchedulerError> {
        if !ratio.is_finite() || ratio == 0.0 {
            return Err(SchedulerError::BadRatio(ratio));
        }
        let s2 = if ratio == 1.0 { s } else { 1.0 - (1.0 - s) / ratio };
        Ok(Self { s_cfg1: s, s_cfg2: s2, ratio, s2_override: false })
    }

    pub fn with_s2(mut self, s2: f64) -> Self {
        self.s_cfg2 = s2;
        self.s2_override = true;
        self
    }

    /// Scale applied for a step with these branch sizes.
    pub fn scale_for(&self, p_cond: usize, p_uncond: usize) -> f64 {
        if p_cond == p_uncond {
            self.s_cfg1
        } else {
            self.s_cfg2
        }
    }
}

/// Combine a conditional prediction with its guidance prediction.
///
/// Equal sizes: `g` is the unconditional prediction. `p_cond < p_uncond`: `g`
/// is the conditional prediction of the weaker size.
pub fn cfg_combine(
    eps_cond: &Tensor,
    eps_guide: &Tensor,
    cfg: &GuidanceConfig,
    p_cond: usize,
    p_uncond: usize,
) -> Result<Tensor, SchedulerError> {
    if p_cond > p_uncond {
        return Err(SchedulerError::WeakerConditional { p_cond, p_uncond });
    }
    if eps_cond.shape() != eps_guide.shape() {
        return Err(SchedulerError::Shape(eps_cond.shape().to_vec(), eps_guide.shape().to_vec()));
    }
    let s = cfg.scale_for(p_cond, p_uncond);
    if s == 1.0 {
        return Ok(eps_cond.clone());
    }
    Ok(eps_guide.zip_map(eps_cond, |g, c| g + s * (c - g)).expect("shapes checked"))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PlanStyle {
    WeakFirst,
    WeakLast,
    Custom,
}

impl PlanStyle {
    fn name(self) -> &'static str {
        match self {
            PlanStyle::WeakFirst => "weak_first",
            PlanStyle::WeakLast => "weak_last",
            PlanStyle::Custom => "custom",
        }
    }
}

/// Branch sizes and effective scale of one reverse step.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PlanEntry {
    pub t: usize,
    pub p_cond: usize,
    /// Guidance branch size; meaningless when the plan is unguided.
    pub p_uncond: usize,
    pub s_eff: f64,
}

impl PlanEntry {
    /// Number of forward passes per image for this step.
    pub fn nfe(&self, guided: bool) -> usize {
        if guided {
            2
        } else {
            1
        }
    }
}

/// Powerful-model step counts for the two guidance branches, counted from the end.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct GuidanceSteps {
    pub cond: usize,
    pub uncond: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct InferencePlan {
    pub steps: usize,
    /// Ordered `t = steps..1`.
    pub entries: Vec<PlanEntry>,
    pub t_weak: usize,
    pub t_powerful: usize,
    pub p_weak: usize,
    pub p_powerful: usize,
    pub style: PlanStyle,
    pub guidance: Option<(GuidanceSteps, GuidanceConfig)>,
}

/// Build a plan from step counts.
///
/// The conditional branch of a guided plan must follow the main schedule, so
/// `guidance.cond == steps - t_weak`; `guidance.uncond <= guidance.cond` keeps
/// the guidance branch never stronger than the conditional one.
pub fn make_plan(
    steps: usize,
    t_weak: usize,
    style: PlanStyle,
    p_weak: usize,
    p_powerful: usize,
    guidance: Option<(GuidanceSteps, GuidanceConfig)>,
) -> Result<InferencePlan, SchedulerError> {
    let bad = |m: String| Err(SchedulerError::InconsistentCounts(m));
    if steps == 0 {
        return bad("plan needs at least one step".into());
    }
    if t_weak > steps {
        return bad(format!("T_weak={t_weak} exceeds T={steps}"));
    }
    if p_weak < p_powerful {
        return bad(format!("weak patch size {p_weak} is smaller than powerful {p_powerful}"));
    }
    if style == PlanStyle::Custom {
        return bad("custom plans are built from explicit entries".into());
    }
    let t_powerful = steps - t_weak;
    if let Some((g, _)) = guidance {
        if g.cond != t_powerful {
            return bad(format!("guidance {}/{} but T_powerful={t_powerful}", g.cond, g.uncond));
        }
        if g.uncond > g.cond {
            return bad(format!("guidance {}/{} runs the guidance branch stronger than the conditional", g.cond, g.uncond));
        }
    }
    let (x, y) = guidance.map(|(g, _)| (g.cond, g.uncond)).unwrap_or((t_powerful, t_powerful));
    let entries = (1..=steps)
        .rev()
        .map(|t| {
            let (cond_strong, uncond_strong) = match style {
                PlanStyle::WeakLast => (t > steps - x, t > steps - y),
                _ => (t <= x, t <= y),
            };
            let pick = |strong: bool| if strong { p_powerful } else { p_weak };
            let (pc, pu) = (pick(cond_strong), pick(uncond_strong));
            let s_eff = guidance.map(|(_, c)| c.scale_for(pc, pu)).unwrap_or(1.0);
            PlanEntry { t, p_cond: pc, p_uncond: pu, s_eff }
        })
        .collect();
    Ok(InferencePlan { steps, entries, t_weak, t_powerful, p_weak, p_powerful, style, guidance })
}

impl InferencePlan {
    /// Plan from explicit per-step `(p_cond, p_uncond)` pairs in `t = T..1` order.
    pub fn custom(
        pairs: &[(usize, usize)],
        p_weak: usize,
        p_powerful: usize,
        guidance: Option<GuidanceConfig>,
    ) -> Result<Self, SchedulerError> {
        if pairs.is_empty() {
            return Err(SchedulerError::InconsistentCounts("plan needs at least one step".into()));
        }
        let steps = pairs.len();
        let mut entries = Vec::with_capacity(steps);
        for (k, &(pc, pu)) in pairs.iter().enumerate() {
            for p in [pc, pu] {
                if p != p_weak && p != p_powerful {
                    return Err(SchedulerError::InconsistentCounts(format!("patch size {p} is neither weak nor powerful")));
                }
            }
            if guidance.is_some() && pc > pu {
                return Err(SchedulerError::WeakerConditional { p_cond: pc, p_uncond: pu });
            }
            let s_eff = guidance.map(|c| c.scale_for(pc, pu)).unwrap_or(1.0);
            entries.push(PlanEntry { t: steps - k, p_cond: pc, p_uncond: pu, s_eff });
        }
        let t_powerful = entries.iter().filter(|e| e.p_cond == p_powerful).count();
        let uncond = entries.iter().filter(|e| e.p_uncond == p_powerful).count();
        Ok(Self {
            steps,
            entries,
            t_weak: steps - t_powerful,
            t_powerful,
            p_weak,
            p_powerful,
            style: PlanStyle::Custom,
            guidance: guidance.map(|c| (GuidanceSteps { cond: t_powerful, uncond }, c)),
        })
    }

    /// All steps at `p_powerful`, optionally guided with equal sizes.
    pub fn baseline(steps: usize, p_weak: usize, p_powerful: usize, cfg: Option<GuidanceConfig>) -> Result<Self, SchedulerError> {
        let g = cfg.map(|c| (GuidanceSteps { cond: steps, uncond: steps }, c));
        make_plan(steps, 0, PlanStyle::WeakFirst, p_weak, p_powerful, g)
    }

    pub fn is_guided(&self) -> bool {
        self.guidance.is_some()
    }

    pub fn guidance_config(&self) -> Option<&GuidanceConfig> {
        self.guidance.as_ref().map(|(_, c)| c)
    }

    /// Entry for reverse step `t`.
    pub fn entry(&self, t: usize) -> Option<&PlanEntry> {
        if t == 0 || t > self.steps {
            return None;
        }
        self.entries.get(self.steps - t)
    }

    /// Conditional-branch patch size per step, `t = T..1`.
    pub fn cond_sizes(&self) -> Vec<usize> {
        self.entries.iter().map(|e| e.p_cond).collect()
    }

    /// Parse the compact text form, e.g. `weak:180,powerful:70;guidance=70/70;cfg=4.0`.
    pub fn parse(text: &str, p_weak: usize, p_powerful: usize) -> Result<Self, SchedulerError> {
        let err = |reason: String| SchedulerError::Parse { text: text.to_string(), reason };
        let mut parts = text.trim().split(';');
        let head = parts.next().unwrap_or("");
        let mut weak = None;
        let mut powerful = None;
        for kv in head.split(',') {
            let (k, v) = kv.split_once(':').ok_or_else(|| err(format!("expected name:count, got {kv:?}")))?;
            let n: usize = v.trim().parse().map_err(|_| err(format!("bad count {v:?}")))?;
            match k.trim() {
                "weak" if weak.is_none() => weak = Some(n),
                "powerful" if powerful.is_none() => powerful = Some(n),
                other => return Err(err(format!("unexpected or repeated key {other:?}"))),
            }
        }
        let (weak, powerful) = match (weak, powerful) {
            (Some(w), Some(p)) => (w, p),
            _ => return Err(err("both weak: and powerful: counts are required".into())),
        };
        let mut style = PlanStyle::WeakFirst;
        let mut gsteps = None;
        let mut scale = None;
        let mut s2 = None;
        let mut ratio = DEFAULT_RATIO;
        let mut seq = None;
        let num = |v: &str| -> Result<f64, SchedulerError> { v.parse().map_err(|_| err(format!("bad number {v:?}"))) };
        for part in parts {
            let (k, v) = part.split_once('=').ok_or_else(|| err(format!("expected key=value, got {part:?}")))?;
            let v = v.trim();
            match k.trim() {
                "style" => {
                    style = match v {
                        "weak_first" => PlanStyle::WeakFirst,
                        "weak_last" => PlanStyle::WeakLast,
                        "custom" => PlanStyle::Custom,
                        _ => return Err(err(format!("unknown style {v:?}"))),
                    }
                }
                "guidance" => {
                    let (x, y) = v.split_once('/').ok_or_else(|| err(format!("guidance must be x/y, got {v:?}")))?;
                    let x = x.parse().map_err(|_| err(format!("bad guidance count {x:?}")))?;
                    let y = y.parse().map_err(|_| err(format!("bad guidance count {y:?}")))?;
                    gsteps = Some(GuidanceSteps { cond: x, uncond: y });
                }
                "cfg" => scale = Some(num(v)?),
                "cfg2" => s2 = Some(num(v)?),
                "ratio" => ratio = num(v)?,
                "seq" => seq = Some(v.to_string()),
                other => return Err(err(format!("unknown key {other:?}"))),
            }
        }
        let cfg = match scale {
            Some(s) => {
                let c = GuidanceConfig::from_scale(s, ratio)?;
                Some(if let Some(s2) = s2 { c.with_s2(s2) } else { c })
            }
            None if gsteps.is_some() || s2.is_some() => return Err(err("guidance keys require cfg=".into())),
            None => None,
        };
        let plan = if style == PlanStyle::Custom {
            let seq = seq.ok_or_else(|| err("custom style requires seq=".into()))?;
            let mut pairs = Vec::new();
            for run in seq.split(',') {
                let (pair, n) = run.split_once('x').ok_or_else(|| err(format!("bad run {run:?}")))?;
                let (pc, pu) = pair.split_once('/').ok_or_else(|| err(format!("bad run {run:?}")))?;
                let pc: usize = pc.parse().map_err(|_| err(format!("bad size {pc:?}")))?;
                let pu: usize = pu.parse().map_err(|_| err(format!("bad size {pu:?}")))?;
                let n: usize = n.parse().map_err(|_| err(format!("bad run length {n:?}")))?;
                pairs.extend(std::iter::repeat_n((pc, pu), n));
            }
            let plan = Self::custom(&pairs, p_weak, p_powerful, cfg)?;
            if plan.t_weak != weak || plan.t_powerful != powerful {
                return Err(SchedulerError::InconsistentCounts(format!(
                    "seq has {} weak and {} powerful steps, header says {weak}/{powerful}",
                    plan.t_weak, plan.t_powerful
                )));
            }
            if let Some(g) = gsteps {
                if plan.guidance.map(|(s, _)| s) != Some(g) {
                    return Err(SchedulerError::InconsistentCounts("guidance counts disagree with seq".into()));
                }
            }
            plan
        } else {
            if seq.is_some() {
                return Err(err("seq= is only valid with style=custom".into()));
            }
            let g = cfg.map(|c| (gsteps.unwrap_or(GuidanceSteps { cond: powerful, uncond: powerful }), c));
            make_plan(weak + powerful, weak, style, p_weak, p_powerful, g)?
        };
        Ok(plan)
    }
}

impl fmt::Display for InferencePlan {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "weak:{},powerful:{}", self.t_weak, self.t_powerful)?;
        if self.style != PlanStyle::WeakFirst {
            write!(f, ";style={}", self.style.name())?;
        }
        if self.style == PlanStyle::Custom {
            let mut runs: Vec<((usize, usize), usize)> = Vec::new();
            for e in &self.entries {
                match runs.last_mut() {
                    Some((pair, n)) if *pair == (e.p_cond, e.p_uncond) => *n += 1,
                    _ => runs.push(((e.p_cond, e.p_uncond), 1)),
                }
            }
            let seq: Vec<String> = runs.iter().map(|((c, u), n)| format!("{c}/{u}x{n}")).collect();
            write!(f, ";seq={}", seq.join(","))?;
        }
        if let Some((g, c)) = &self.guidance {
            write!(f, ";guidance={}/{};cfg={:?}", g.cond, g.uncond, c.s_cfg1)?;
            if c.s2_override {
                write!(f, ";cfg2={:?}", c.s_cfg2)?;
            }
            if c.ratio != DEFAULT_RATIO {
                write!(f, ";ratio={:?}", c.ratio)?;
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn guided(x: usize, y: usize, s: f64) -> Option<(GuidanceSteps, GuidanceConfig)> {
        Some((GuidanceSteps { cond: x, uncond: y }, GuidanceConfig::from_scale(s, DEFAULT_RATIO).unwrap()))
    }

    #[test]
    fn seventy_seventy_uses_powerful_for_last_seventy_on_both_branches() {
        let plan = make_plan(250, 180, PlanStyle::WeakFirst, 4, 2, guided(70, 70, 4.0)).unwrap();
        assert_eq!(plan.entries.len(), 250);
        assert_eq!(plan.entries[0].t, 250);
        for e in &plan.entries {
            let want = if e.t <= 70 { 2 } else { 4 };
            assert_eq!((e.p_cond, e.p_uncond), (want, want));
            assert_eq!(e.s_eff, 4.0);
        }
        assert_eq!(plan.t_weak + plan.t_powerful, 250);
    }

    #[test]
    fn asymmetric_guidance_mixes_sizes() {
        let plan = make_plan(250, 160, PlanStyle::WeakFirst, 4, 2, guided(90, 50, 4.0)).unwrap();
        let mixed: Vec<_> = plan.entries.iter().filter(|e| e.p_cond != e.p_uncond).collect();
        assert_eq!(mixed.len(), 40);
        assert!(mixed.iter().all(|e| e.p_cond == 2 && e.p_uncond == 4 && (e.s_eff - 2.2).abs() < 1e-15));
        assert!(make_plan(250, 160, PlanStyle::WeakFirst, 4, 2, guided(50, 90, 4.0)).is_err());
        assert!(make_plan(250, 180, PlanStyle::WeakFirst, 4, 2, guided(60, 60, 4.0)).is_err());
    }

    #[test]
    fn extreme_counts() {
        let all_p = make_plan(10, 0, PlanStyle::WeakFirst, 4, 2, None).unwrap();
        assert!(all_p.cond_sizes().iter().all(|&p| p == 2));
        assert_eq!(all_p, InferencePlan::baseline(10, 4, 2, None).unwrap());
        let all_w = make_plan(10, 10, PlanStyle::WeakFirst, 4, 2, None).unwrap();
        assert!(all_w.cond_sizes().iter().all(|&p| p == 4));
        assert!(matches!(make_plan(10, 11, PlanStyle::WeakFirst, 4, 2, None), Err(SchedulerError::InconsistentCounts(_))));
    }

    #[test]
    fn weak_last_reverses_the_order() {
        let first = make_plan(10, 4, PlanStyle::WeakFirst, 4, 2, None).unwrap();
        let last = make_plan(10, 4, PlanStyle::WeakLast, 4, 2, None).unwrap();
        let mut rev = first.cond_sizes();
        rev.reverse();
        assert_eq!(last.cond_sizes(), rev);
        assert_eq!(last.cond_sizes()[..6], [2; 6]);
    }

    #[test]
    fn text_form_round_trips() {
        let text = "weak:180,powerful:70;guidance=70/70;cfg=4.0";
        let plan = InferencePlan::parse(text, 4, 2).unwrap();
        assert_eq!(plan.to_string(), text);
        assert_eq!(plan, make_plan(250, 180, PlanStyle::WeakFirst, 4, 2, guided(70, 70, 4.0)).unwrap());
        // defaults are filled in and whitespace dropped
        let plan = InferencePlan::parse(" weak: 180 , powerful:70 ; cfg = 4 ", 4, 2).unwrap();
        assert_eq!(plan.to_string(), text);
        for t in [
            "weak:0,powerful:250",
            "weak:4,powerful:6;style=weak_last",
            "weak:160,powerful:90;guidance=90/50;cfg=4.0;cfg2=3.0;ratio=2.0",
            "weak:2,powerful:3;style=custom;seq=4/4x1,2/4x1,4/4x1,2/2x2;guidance=3/2;cfg=1.5",
        ] {
            assert_eq!(InferencePlan::parse(t, 4, 2).unwrap().to_string(), t);
        }
        for bad in ["weak:1", "weak:1,powerful:x", "weak:1,powerful:1;bogus=1", "weak:1,powerful:1;guidance=1/1", "weak:1,powerful:1;cfg=a"] {
            assert!(InferencePlan::parse(bad, 4, 2).is_err(), "{bad}");
        }
    }

    #[test]
    fn ratio_rule() {
        let c = GuidanceConfig::from_scale(4.0, 2.5).unwrap();
        assert!((c.s_cfg2 - 2.2).abs() < 1e-15);
        assert!(((1.0 - c.s_cfg1) / (1.0 - c.s_cfg2) - 2.5).abs() < 1e-12);
        assert_eq!(GuidanceConfig::from_scale(4.0, 1.0).unwrap().s_cfg2, 4.0);
        assert!(GuidanceConfig::from_scale(4.0, 0.0).is_err());
    }

    #[test]
    fn combine_hand_arithmetic() {
        let c = Tensor::from_vec(vec![1.0, 2.0, -1.0]);
        let g = Tensor::from_vec(vec![0.5, 0.0, 1.0]);
        let cfg = GuidanceConfig::from_scale(4.0, 2.5).unwrap();
        let eq = cfg_combine(&c, &g, &cfg, 2, 2).unwrap();
        assert_eq!(eq.data(), &[2.5, 8.0, -7.0]);
        let mixed = cfg_combine(&c, &g, &cfg, 2, 4).unwrap();
        let want = [0.5 + 2.2 * 0.5, 2.2 * 2.0, 1.0 - 2.2 * 2.0];
        for (a, b) in mixed.data().iter().zip(want) {
            assert!((a - b).abs() < 1e-12);
        }
        assert!(matches!(cfg_combine(&c, &g, &cfg, 4, 2), Err(SchedulerError::WeakerConditional { .. })));
    }

    #[test]
    fn unit_scale_returns_conditional_and_zero_scale_returns_guide() {
        let c = Tensor::from_vec(vec![0.1, 0.7, -0.3]);
        let g = Tensor::from_vec(vec![0.9, -2.0, 0.3]);
        let one = GuidanceConfig::from_scale(1.0, 2.5).unwrap();
        assert!(cfg_combine(&c, &g, &one, 2, 2).unwrap().bit_eq(&c));
        assert!(cfg_combine(&c, &g, &one, 2, 4).unwrap().bit_eq(&c));
        let zero = GuidanceConfig::from_scale(0.0, 2.5).unwrap();
        assert!(cfg_combine(&c, &g, &zero, 2, 2).unwrap().bit_eq(&g));
    }

    proptest! {
        #[test]
        fn combine_is_affine(
            s in -3.0f64..6.0,
            a in proptest::collection::vec(-2.0f64..2.0, 12),
            shift in -1.0f64..1.0,
            mixed in any::<bool>(),
        ) {
            let cfg = GuidanceConfig::from_scale(s, DEFAULT_RATIO).unwrap();
            let pu = if mixed { 4 } else { 2 };
            let c1 = Tensor::from_vec(a[..3].to_vec());
            let g1 = Tensor::from_vec(a[3..6].to_vec());
            let c2 = Tensor::from_vec(a[6..9].to_vec());
            let g2 = Tensor::from_vec(a[9..].to_vec());
            let f = |c: &Tensor, g: &Tensor| cfg_combine(c, g, &cfg, 2, pu).unwrap();
            // superposition with weights summing to one
            let lam = 0.3;
            let mix = |x: &Tensor, y: &Tensor| x.scale(lam).add(&y.scale(1.0 - lam)).unwrap();
            let lhs = f(&mix(&c1, &c2), &mix(&g1, &g2));
            let rhs = mix(&f(&c1, &g1), &f(&c2, &g2));
            prop_assert!(lhs.max_abs_diff(&rhs) < 1e-12);
            // a constant added to both branches passes straight through
            let k = Tensor::full(&[3], shift);
            let shifted = f(&c1.add(&k).unwrap(), &g1.add(&k).unwrap());
            prop_assert!(shifted.max_abs_diff(&f(&c1, &g1).add(&k).unwrap()) < 1e-12);
        }

        #[test]
        fn weak_first_counts_are_consistent(steps in 1usize..300, frac in 0.0f64..1.0) {
            let t_weak = ((steps as f64) * frac) as usize;
            let plan = make_plan(steps, t_weak, PlanStyle::WeakFirst, 4, 2, None).unwrap();
            prop_assert_eq!(plan.t_weak + plan.t_powerful, steps);
            prop_assert_eq!(plan.cond_sizes().iter().filter(|&&p| p == 4).count(), t_weak);
            for (k, e) in plan.entries.iter().enumerate() {
                prop_assert_eq!(e.t, steps - k);
            }
        }
    }
}
