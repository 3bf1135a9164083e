//! Exit policies decide which pixels are final after each exit.
//!
//! Every policy reduces to one question: given the class `j` a pixel is
//! predicted as, what probability must it exceed to be frozen? The argmax is
//! taken by the caller, so a policy only ever gates finalization, it never
//! changes the predicted class.
//!
//! Policies are trait objects constructed by name through a
//! [`PolicyRegistry`], which parses specs such as `dense`, `uniform:0.998`
//! or `cbt:thresholds.json`.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;

use crate::calibration::ThresholdVector;
use crate::error::{Error, Result};
use crate::masked::PixelMask;
use crate::model::PredictionCanvas;
use crate::tensor::{argmax_at, argmax_slice, Tensor};

pub trait ExitPolicy: fmt::Debug + Send + Sync {
    /// Stable spec-like text, e.g. `uniform:0.998`. Used in reports.
    fn descriptor(&self) -> String;

    /// Human-facing method name for tables.
    fn label(&self) -> String {
        self.descriptor()
    }

    /// Probability a pixel predicted as `class` must strictly exceed to be
    /// finalized. `None` means such pixels never finalize early.
    fn threshold(&self, class: usize) -> Option<f64>;

    /// Checks the policy can be used with a `num_classes` model.
    fn validate(&self, num_classes: usize) -> Result<()> {
        let _ = num_classes;
        Ok(())
    }
}

/// Never finalizes before the last exit.
#[derive(Debug, Clone, Copy, Default)]
pub struct DensePolicy;

impl ExitPolicy for DensePolicy {
    fn descriptor(&self) -> String {
        "dense".into()
    }

    fn label(&self) -> String {
        "Dense".into()
    }

    fn threshold(&self, _class: usize) -> Option<f64> {
        None
    }
}

/// One threshold shared by all classes.
#[derive(Debug, Clone, Copy)]
pub struct UniformPolicy {
    t: f64,
}

impl UniformPolicy {
    pub fn new(t: f64) -> Result<Self> {
        if !(t > 0.0 && t <= 1.0) {
            return Err(Error::config(format!(
                "uniform threshold {t} not in (0, 1]"
            )));
        }
        Ok(Self { t })
    }

    pub fn t(&self) -> f64 {
        self.t
    }
}

impl ExitPolicy for UniformPolicy {
    fn descriptor(&self) -> String {
        format!("uniform:{}", self.t)
    }

    fn label(&self) -> String {
        format!("ADP-C [{}]", self.t)
    }

    fn threshold(&self, _class: usize) -> Option<f64> {
        Some(self.t)
    }
}

/// Calibrated per-class thresholds.
#[derive(Debug, Clone)]
pub struct PerClassPolicy {
    thresholds: ThresholdVector,
}

impl PerClassPolicy {
    pub fn new(thresholds: ThresholdVector) -> Self {
        Self { thresholds }
    }

    pub fn thresholds(&self) -> &ThresholdVector {
        &self.thresholds
    }
}

impl ExitPolicy for PerClassPolicy {
    fn descriptor(&self) -> String {
        format!(
            "cbt:[{},{}]",
            self.thresholds.alpha(),
            self.thresholds.beta()
        )
    }

    fn label(&self) -> String {
        format!(
            "CBT [{}, {}]",
            self.thresholds.alpha(),
            self.thresholds.beta()
        )
    }

    fn threshold(&self, class: usize) -> Option<f64> {
        self.thresholds.values().get(class).copied()
    }

    fn validate(&self, num_classes: usize) -> Result<()> {
        self.thresholds.check_classes(num_classes)
    }
}

/// The class a pixel is finalized as, if `policy` lets it finalize.
pub fn should_finalize(pi: &[f32], policy: &dyn ExitPolicy) -> Option<usize> {
    let (j, p) = argmax_slice(pi);
    passes(policy, j, p).then_some(j)
}

#[inline]
fn passes(policy: &dyn ExitPolicy, class: usize, p: f32) -> bool {
    policy.threshold(class).is_some_and(|t| p as f64 > t)
}

/// Examines the active pixels of `mask` against `probs` and finalizes those
/// the policy accepts. Returns the narrowed mask; `canvas` is updated in place.
pub fn update_mask(
    mask: &PixelMask,
    probs: &Tensor,
    policy: &dyn ExitPolicy,
    canvas: &mut PredictionCanvas,
    exit_index: usize,
) -> Result<PixelMask> {
    if (probs.height(), probs.width()) != (mask.height(), mask.width()) {
        return Err(Error::config("probability map and mask dimensions differ"));
    }
    let mut finalized = Vec::new();
    let next = mask.retain(|pos| {
        let (j, p) = argmax_at(probs, pos);
        if passes(policy, j, p) {
            finalized.push((pos, j));
            false
        } else {
            true
        }
    });
    for (pos, class) in finalized {
        canvas.finalize(pos, class, exit_index)?;
    }
    Ok(next)
}

/// The single threshold `t` if every present class uses it.
pub fn equivalent_uniform(thresholds: &ThresholdVector) -> Option<f64> {
    let mut present = thresholds.present_values();
    let first = present.next()?;
    present.all(|t| t == first).then_some(first)
}

pub type PolicyFactory = Box<dyn Fn(Option<&str>) -> Result<Box<dyn ExitPolicy>> + Send + Sync>;

/// Named constructors for exit policies.
pub struct PolicyRegistry {
    factories: BTreeMap<String, PolicyFactory>,
}

impl fmt::Debug for PolicyRegistry {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("PolicyRegistry")
            .field("names", &self.factories.keys())
            .finish()
    }
}

impl Default for PolicyRegistry {
    fn default() -> Self {
        Self::with_builtins()
    }
}

impl PolicyRegistry {
    pub fn empty() -> Self {
        Self {
            factories: BTreeMap::new(),
        }
    }

    /// `dense`, `uniform:<t>` and `cbt:<thresholds.json>`.
    pub fn with_builtins() -> Self {
        let mut reg = Self::empty();
        reg.register("dense", |arg| match arg {
            None => Ok(Box::new(DensePolicy) as Box<dyn ExitPolicy>),
            Some(a) => Err(Error::config(format!("dense takes no argument, got `{a}`"))),
        });
        reg.register("uniform", |arg| {
            let arg =
                arg.ok_or_else(|| Error::config("uniform needs a threshold, e.g. uniform:0.998"))?;
            let t: f64 = arg
                .parse()
                .map_err(|_| Error::config(format!("bad uniform threshold `{arg}`")))?;
            Ok(Box::new(UniformPolicy::new(t)?))
        });
        reg.register("cbt", |arg| {
            let path = arg.ok_or_else(|| {
                Error::config("cbt needs a thresholds file, e.g. cbt:thresholds.json")
            })?;
            let bytes = std::fs::read(Path::new(path))?;
            Ok(Box::new(PerClassPolicy::new(ThresholdVector::from_json(
                &bytes,
            )?)))
        });
        reg
    }

    pub fn register<F>(&mut self, name: &str, factory: F)
    where
        F: Fn(Option<&str>) -> Result<Box<dyn ExitPolicy>> + Send + Sync + 'static,
    {
        self.factories.insert(name.to_string(), Box::new(factory));
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.factories.keys().map(String::as_str)
    }

    /// Builds a policy from `name` or `name:argument`.
    pub fn create(&self, spec: &str) -> Result<Box<dyn ExitPolicy>> {
        let (name, arg) = match spec.split_once(':') {
            Some((n, a)) => (n, Some(a)),
            None => (spec, None),
        };
        let factory = self.factories.get(name).ok_or_else(|| {
            let known: Vec<_> = self.names().collect();
            Error::config(format!(
                "unknown policy `{name}` (known: {})",
                known.join(", ")
            ))
        })?;
        factory(arg)
    }
}
