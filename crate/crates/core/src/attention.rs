//! Capture and policy-driven injection of attention variables across the
//! reference, layout, and target denoising paths.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::backends::{AttnKind, LayerDesc};
use crate::error::{Error, Result};
use crate::image::BlendMask;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Effective attention variables of one layer in one forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerTap<T> {
    pub layer: usize,
    pub kind: AttnKind,
    /// `(N, d)` queries over spatial tokens.
    pub q: Tensor<T>,
    /// `(M, d)` keys; `M = N` for self-attention, text length for cross-attention.
    pub k: Tensor<T>,
    pub v: Tensor<T>,
    /// `(N, M)` softmax weights.
    pub probs: Tensor<T>,
    /// `(N, d)` attention output after the output projection.
    pub phi: Tensor<T>,
}

pub type TapSink<T> = Vec<LayerTap<T>>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PathRole {
    Reference,
    Layout,
    Target,
}

/// Per-step, per-layer record of one denoising path.
#[derive(Debug, Clone)]
pub struct AttentionTrace<T> {
    pub path: PathRole,
    entries: BTreeMap<(usize, usize), LayerTap<T>>,
}

impl<T: Scalar> AttentionTrace<T> {
    pub fn new(path: PathRole) -> Self {
        Self {
            path,
            entries: BTreeMap::new(),
        }
    }

    /// Stores the taps of sampling iteration `s`; at most one entry per (s, layer).
    pub fn record(&mut self, s: usize, taps: TapSink<T>) -> Result<()> {
        for tap in taps {
            let key = (s, tap.layer);
            if self.entries.contains_key(&key) {
                return Err(Error::Layer {
                    layer: tap.layer,
                    reason: format!("step {s} already recorded"),
                });
            }
            self.entries.insert(key, tap);
        }
        Ok(())
    }

    pub fn get(&self, s: usize, layer: usize) -> Result<&LayerTap<T>> {
        self.entries
            .get(&(s, layer))
            .ok_or(Error::MissingTrace { step: s, layer })
    }

    pub fn steps(&self) -> Vec<usize> {
        let mut v: Vec<usize> = self.entries.keys().map(|&(s, _)| s).collect();
        v.dedup();
        v
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&(usize, usize), &LayerTap<T>)> {
        self.entries.iter()
    }
}

/// Replacement for a self-attention layer's output.
#[derive(Debug, Clone, PartialEq)]
pub enum PhiOverride<T> {
    /// Use this `(N, d)` output verbatim.
    Replace(Tensor<T>),
    /// `M ⊙ φ_live + (1 − M) ⊙ other`, with `M` resized to the layer grid.
    Blend { other: Tensor<T>, mask: BlendMask<T> },
}

/// Variables to substitute in one layer; `None` keeps the live value.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerOverride<T> {
    pub q: Option<Tensor<T>>,
    pub k: Option<Tensor<T>>,
    pub v: Option<Tensor<T>>,
    pub phi: Option<PhiOverride<T>>,
}

impl<T> Default for LayerOverride<T> {
    fn default() -> Self {
        Self {
            q: None,
            k: None,
            v: None,
            phi: None,
        }
    }
}

impl<T: Scalar> LayerOverride<T> {
    pub fn echo(tap: &LayerTap<T>) -> Self {
        Self {
            q: Some(tap.q.clone()),
            k: Some(tap.k.clone()),
            v: Some(tap.v.clone()),
            phi: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct OverrideBundle<T> {
    pub layers: BTreeMap<usize, LayerOverride<T>>,
}

impl<T: Scalar> OverrideBundle<T> {
    pub fn new() -> Self {
        Self {
            layers: BTreeMap::new(),
        }
    }

    pub fn get(&self, layer: usize) -> Option<&LayerOverride<T>> {
        self.layers.get(&layer)
    }

    pub fn entry(&mut self, layer: usize) -> &mut LayerOverride<T> {
        self.layers.entry(layer).or_default()
    }

    /// Bundle that feeds every captured Q/K/V straight back in.
    pub fn echo_taps(taps: &[LayerTap<T>]) -> Self {
        Self {
            layers: taps.iter().map(|t| (t.layer, LayerOverride::echo(t))).collect(),
        }
    }

    pub fn validate_against(&self, catalog: &[LayerDesc]) -> Result<()> {
        for &layer in self.layers.keys() {
            if !catalog.iter().any(|d| d.index == layer) {
                return Err(Error::Layer {
                    layer,
                    reason: "not in backend catalog".into(),
                });
            }
        }
        Ok(())
    }
}

/// Source of the target path's swapped variables at one iteration.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Branch {
    /// Cross- and self-attention Q/K/V taken from the layout path.
    LayoutSource,
    /// Self-attention K/V from the reference path; target Q and cross-attention kept.
    ReferenceSource,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SwapPolicy {
    pub steps: usize,
    pub lambda2: usize,
    pub layers: Vec<usize>,
    pub blend_start: usize,
    pub blend_enabled: bool,
    pub override_self_query: bool,
}

impl SwapPolicy {
    pub fn new(
        steps: usize,
        lambda2: usize,
        layers: Vec<usize>,
        blend_start: usize,
        catalog: &[LayerDesc],
    ) -> Result<Self> {
        if lambda2 > steps {
            return Err(Error::validation("lambda2", "exceeds T"));
        }
        if blend_start == 0 || blend_start > steps {
            return Err(Error::validation("blend_start", "outside [1, T]"));
        }
        for &l in &layers {
            if !catalog.iter().any(|d| d.index == l) {
                return Err(Error::Layer {
                    layer: l,
                    reason: "swap layer not in backend catalog".into(),
                });
            }
        }
        Ok(Self {
            steps,
            lambda2,
            layers,
            blend_start,
            blend_enabled: true,
            override_self_query: true,
        })
    }

    /// Iteration `s` runs the layout-source branch iff its timestep `T − s + 1`
    /// exceeds `lambda2`.
    pub fn branch(&self, s: usize) -> Branch {
        if s + self.lambda2 <= self.steps {
            Branch::LayoutSource
        } else {
            Branch::ReferenceSource
        }
    }
}

pub fn blend_gate(policy: &SwapPolicy, s: usize) -> bool {
    policy.blend_enabled && s >= policy.blend_start
}

/// Builds the target path's overrides for iteration `s`.
pub fn plan_overrides<T: Scalar>(
    policy: &SwapPolicy,
    catalog: &[LayerDesc],
    s: usize,
    layout: &AttentionTrace<T>,
    reference: &AttentionTrace<T>,
) -> Result<(Branch, OverrideBundle<T>)> {
    let branch = policy.branch(s);
    let mut bundle = OverrideBundle::new();
    for &layer in &policy.layers {
        let kind = catalog
            .iter()
            .find(|d| d.index == layer)
            .map(|d| d.kind)
            .ok_or(Error::Layer {
                layer,
                reason: "not in backend catalog".into(),
            })?;
        match (branch, kind) {
            (Branch::LayoutSource, AttnKind::Cross) => {
                bundle.layers.insert(layer, LayerOverride::echo(layout.get(s, layer)?));
            }
            (Branch::LayoutSource, AttnKind::SelfAttn) => {
                let mut o = LayerOverride::echo(layout.get(s, layer)?);
                if !policy.override_self_query {
                    o.q = None;
                }
                bundle.layers.insert(layer, o);
            }
            (Branch::ReferenceSource, AttnKind::SelfAttn) => {
                let tap = reference.get(s, layer)?;
                bundle.layers.insert(
                    layer,
                    LayerOverride {
                        k: Some(tap.k.clone()),
                        v: Some(tap.v.clone()),
                        ..Default::default()
                    },
                );
            }
            (Branch::ReferenceSource, AttnKind::Cross) => {}
        }
    }
    Ok((branch, bundle))
}

/// Adds mask blending of self-attention outputs toward the layout path's φ.
pub fn attach_blend<T: Scalar>(
    bundle: &mut OverrideBundle<T>,
    policy: &SwapPolicy,
    catalog: &[LayerDesc],
    s: usize,
    layout: &AttentionTrace<T>,
    mask: &BlendMask<T>,
) -> Result<()> {
    for &layer in &policy.layers {
        let is_self = catalog
            .iter()
            .any(|d| d.index == layer && d.kind == AttnKind::SelfAttn);
        if is_self {
            let phi_o = layout.get(s, layer)?.phi.clone();
            bundle.entry(layer).phi = Some(PhiOverride::Blend {
                other: phi_o,
                mask: mask.clone(),
            });
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn catalog() -> Vec<LayerDesc> {
        vec![
            LayerDesc { index: 0, kind: AttnKind::SelfAttn, resolution: (2, 2) },
            LayerDesc { index: 1, kind: AttnKind::Cross, resolution: (2, 2) },
        ]
    }

    fn tap(layer: usize, kind: AttnKind, fill: f64) -> LayerTap<f64> {
        let t = |r: usize, c: usize| Tensor::full(&[r, c], fill);
        LayerTap { layer, kind, q: t(4, 3), k: t(4, 3), v: t(4, 3), probs: t(4, 4), phi: t(4, 3) }
    }

    fn traces(steps: usize) -> (AttentionTrace<f64>, AttentionTrace<f64>) {
        let mut lay = AttentionTrace::new(PathRole::Layout);
        let mut refr = AttentionTrace::new(PathRole::Reference);
        for s in 1..=steps {
            lay.record(s, vec![tap(0, AttnKind::SelfAttn, 1.0), tap(1, AttnKind::Cross, 1.0)]).unwrap();
            refr.record(s, vec![tap(0, AttnKind::SelfAttn, 2.0), tap(1, AttnKind::Cross, 2.0)]).unwrap();
        }
        (lay, refr)
    }

    fn policy(lambda2: usize) -> SwapPolicy {
        SwapPolicy::new(50, lambda2, vec![0, 1], 31, &catalog()).unwrap()
    }

    #[test]
    fn branch_switch_at_forty() {
        let (lay, refr) = traces(50);
        let p = policy(10);
        let (b, bundle) = plan_overrides(&p, &catalog(), 40, &lay, &refr).unwrap();
        assert_eq!(b, Branch::LayoutSource);
        assert_eq!(bundle.layers.len(), 2);
        assert_eq!(bundle.get(0).unwrap().q.as_ref().unwrap().data()[0], 1.0);
        assert_eq!(bundle.get(1).unwrap().k.as_ref().unwrap().data()[0], 1.0);

        let (b, bundle) = plan_overrides(&p, &catalog(), 41, &lay, &refr).unwrap();
        assert_eq!(b, Branch::ReferenceSource);
        let o = bundle.get(0).unwrap();
        assert!(o.q.is_none());
        assert_eq!(o.k.as_ref().unwrap().data()[0], 2.0);
        assert_eq!(o.v.as_ref().unwrap().data()[0], 2.0);
        assert!(bundle.get(1).is_none());
    }

    #[test]
    fn lambda2_zero_is_always_layout() {
        let p = policy(0);
        assert!((1..=50).all(|s| p.branch(s) == Branch::LayoutSource));
    }

    #[test]
    fn branches_partition_all_steps() {
        for l2 in [0, 1, 10, 49, 50] {
            let p = policy(l2);
            let layout = (1..=50).filter(|&s| p.branch(s) == Branch::LayoutSource).count();
            assert_eq!(layout, 50 - l2);
        }
    }

    #[test]
    fn blend_gate_boundaries() {
        let p = policy(10);
        assert!(!blend_gate(&p, 30));
        assert!(blend_gate(&p, 31));
        let mut p1 = SwapPolicy::new(50, 10, vec![], 1, &catalog()).unwrap();
        assert!((1..=50).all(|s| blend_gate(&p1, s)));
        p1.blend_enabled = false;
        assert!(!(1..=50).any(|s| blend_gate(&p1, s)));
    }

    #[test]
    fn missing_entry_names_step_and_layer() {
        let (lay, refr) = traces(3);
        let err = plan_overrides(&policy(10), &catalog(), 4, &lay, &refr).unwrap_err();
        assert!(matches!(err, Error::MissingTrace { step: 4, layer: 0 }));
    }

    #[test]
    fn duplicate_record_rejected() {
        let mut t = AttentionTrace::new(PathRole::Target);
        t.record(1, vec![tap(0, AttnKind::SelfAttn, 0.0)]).unwrap();
        assert!(t.record(1, vec![tap(0, AttnKind::SelfAttn, 0.0)]).is_err());
    }

    #[test]
    fn plan_is_pure() {
        let (lay, refr) = traces(50);
        let p = policy(10);
        for s in [1, 40, 41, 50] {
            assert_eq!(
                plan_overrides(&p, &catalog(), s, &lay, &refr).unwrap(),
                plan_overrides(&p, &catalog(), s, &lay, &refr).unwrap()
            );
        }
    }

    #[test]
    fn unknown_swap_layer_rejected() {
        assert!(SwapPolicy::new(50, 10, vec![7], 31, &catalog()).is_err());
    }
}
