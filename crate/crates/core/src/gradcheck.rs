//! Central finite-difference checks of the analytic gradients of whole
//! models.
//!
//! Probes are spread round-robin over every parameter tensor, with a random
//! element chosen inside each tensor, so small tensors (gates, norms) are
//! covered as well as large ones.

use serde::{Deserialize, Serialize};

use crate::dual_encoder::{ContrastivePair, DualEncoder};
use crate::error::{Error, Result};
use crate::model::{Example, Model};
use crate::numerics::{GradReport, Matrix, Rng};
use crate::params::{ParamId, ParamSet};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GradCheckConfig {
    pub probes: usize,
    pub eps: f64,
    pub seed: u64,
    /// Std of Gaussian noise added to every parameter before checking, so
    /// that zero-initialized tensors do not hide gradient paths.
    pub jitter: f64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            probes: 240,
            eps: 1e-5,
            seed: 0,
            jitter: 0.1,
        }
    }
}

pub fn jitter(store: &mut ParamSet, std: f64, rng: &mut Rng) {
    if std == 0.0 {
        return;
    }
    for id in store.ids().collect::<Vec<_>>() {
        let m = store.get_mut(id);
        for v in m.data_mut() {
            *v += std * rng.normal();
        }
    }
}

fn probe_sites(store: &ParamSet, probes: usize, rng: &mut Rng) -> Vec<(ParamId, usize)> {
    let ids: Vec<ParamId> = store.ids().filter(|&id| !store.get(id).is_empty()).collect();
    (0..probes)
        .map(|i| {
            let id = ids[i % ids.len()];
            (id, rng.below(store.get(id).len()))
        })
        .collect()
}

/// Compares analytic gradients of `loss` with central differences at the
/// chosen sites. `loss` is evaluated on perturbed copies of `store`.
fn check_sites<F>(
    store: &ParamSet,
    grads: &[Option<Matrix>],
    sites: &[(ParamId, usize)],
    eps: f64,
    mut loss: F,
) -> Result<GradReport>
where
    F: FnMut(&ParamSet) -> Result<f64>,
{
    let mut probe = store.clone();
    let mut report = GradReport::default();
    for &(id, i) in sites {
        let analytic = grads
            .get(id.index())
            .and_then(|g| g.as_ref())
            .map_or(0.0, |g| g.data()[i]);
        let orig = probe.get(id).data()[i];
        probe.get_mut(id).data_mut()[i] = orig + eps;
        let plus = loss(&probe)?;
        probe.get_mut(id).data_mut()[i] = orig - eps;
        let minus = loss(&probe)?;
        probe.get_mut(id).data_mut()[i] = orig;
        let numeric = (plus - minus) / (2.0 * eps);
        if !numeric.is_finite() || !analytic.is_finite() {
            return Err(Error::Numeric(format!(
                "non-finite gradient at {}[{i}]",
                store.entry(id).name
            )));
        }
        report.record(&store.entry(id).name, i, analytic, numeric);
    }
    Ok(report)
}

fn mean_loss_and_grads(model: &Model, examples: &[Example]) -> Result<(f64, Vec<Option<Matrix>>)> {
    if examples.is_empty() {
        return Err(Error::InvalidInput("gradient check needs at least one example".into()));
    }
    let scale = 1.0 / examples.len() as f64;
    let mut total = 0.0;
    let mut acc: Vec<Option<Matrix>> = vec![None; model.store.len()];
    for ex in examples {
        let (loss, grads) = model.loss_and_gradients(ex)?;
        total += loss * scale;
        for (slot, g) in acc.iter_mut().zip(grads) {
            if let Some(g) = g {
                let g = g.scale(scale);
                match slot {
                    Some(a) => a.add_assign(&g)?,
                    None => *slot = Some(g),
                }
            }
        }
    }
    Ok((total, acc))
}

/// Checks the language-modelling loss of `model` averaged over `examples`.
/// The model is jittered first according to `cfg`.
pub fn check_model(model: &Model, examples: &[Example], cfg: &GradCheckConfig) -> Result<GradReport> {
    let mut rng = Rng::new(cfg.seed);
    let mut model = model.clone();
    jitter(&mut model.store, cfg.jitter, &mut rng);
    let (_, grads) = mean_loss_and_grads(&model, examples)?;
    let sites = probe_sites(&model.store, cfg.probes, &mut rng);
    let mut scratch = model.clone();
    check_sites(&model.store, &grads, &sites, cfg.eps, |store| {
        scratch.store.load_values(store)?;
        scratch.mean_loss(examples)
    })
}

/// Checks the contrastive loss of `enc` on one batch.
pub fn check_dual_encoder(enc: &DualEncoder, batch: &[ContrastivePair], cfg: &GradCheckConfig) -> Result<GradReport> {
    let mut rng = Rng::new(cfg.seed);
    let mut enc = enc.clone();
    jitter(enc.params_mut(), cfg.jitter, &mut rng);
    let (_, grads) = enc.loss_and_gradients(batch)?;
    let sites = probe_sites(enc.params(), cfg.probes, &mut rng);
    let mut scratch = enc.clone();
    check_sites(enc.params(), &grads, &sites, cfg.eps, |store| {
        scratch.params_mut().load_values(store)?;
        scratch.contrastive_loss(batch)
    })
}

/// Fixed micro-scale inputs for [`check_model`]: two examples over the
/// 11-token vocabulary of the micro configuration.
pub fn micro_examples(model: &Model, seed: u64) -> Vec<Example> {
    let cfg = &model.cfg;
    let mut rng = Rng::new(seed);
    let ordinary = cfg.vocab - 3;
    let mut ids = |n: usize| (0..n).map(|_| rng.below(ordinary)).collect::<Vec<_>>();
    let (sem, q1, r1, q2, r2) = (ids(3), ids(2), ids(3), ids(1), ids(2));
    let mut rng = Rng::new(seed ^ 0x5eed);
    let patches = cfg.max_patches.min(3);
    vec![
        Example {
            image: Matrix::randn(patches, cfg.patch_dim, 1.0, &mut rng),
            semantic_ids: sem,
            query_ids: q1,
            response_ids: r1,
        },
        Example {
            image: Matrix::randn(patches, cfg.patch_dim, 1.0, &mut rng),
            semantic_ids: Vec::new(),
            query_ids: q2,
            response_ids: r2,
        },
    ]
}
