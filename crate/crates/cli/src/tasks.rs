use std::sync::Arc;

use anyhow::{bail, Context};
use pgap_core::objectives::{
    load_csv, lora_wrap, make_synthetic, Batch, CsvSchema, LinearModel, Link, LossOracle, ParamSet, RankQuadratic,
    SyntheticTask, TinyMlp,
};
use pgap_core::randsrc::Seed;

use crate::config::TaskSection;

pub struct BuiltTask {
    pub oracle: Arc<dyn LossOracle>,
    pub data: Batch,
    pub init: ParamSet,
}

fn shapes(t: &TaskSection) -> Vec<(usize, usize)> {
    t.shapes
        .as_deref()
        .unwrap_or_default()
        .iter()
        .map(|[m, n]| (*m, *n))
        .collect()
}

/// Builds the oracle, dataset and initial parameters of a resolved task.
pub fn build(t: &TaskSection) -> anyhow::Result<BuiltTask> {
    let seed = Seed(t.seed.unwrap_or(0));
    let name = t.name.as_deref().unwrap_or("quad_lowrank");
    let n = t.n.unwrap_or(512);
    let d = t.d.unwrap_or(64);
    let (oracle, data): (Arc<dyn LossOracle>, Batch) = match name {
        "quad_lowrank" => {
            let rq = RankQuadratic::planted(&shapes(t), t.spectrum.as_deref().unwrap_or(&[1.0]), seed.derive("task", 0))?;
            (Arc::new(rq), Batch::empty())
        }
        "matrix_logistic" => {
            let shapes = shapes(t);
            let Some(&shape) = shapes.first() else {
                bail!("matrix_logistic needs at least one shape");
            };
            if shapes.iter().any(|s| *s != shape) {
                bail!("matrix_logistic needs all blocks of one shape, got {shapes:?}");
            }
            let recipe = SyntheticTask::MatrixLogistic {
                shape,
                blocks: shapes.len(),
                rank: t.rank.unwrap_or(1),
                signal: t.signal.unwrap_or(0.3),
                flip: t.flip.unwrap_or(0.0),
            };
            let (data, _) = make_synthetic(&recipe, seed.derive("task", 0), n, shapes.len() * shape.0 * shape.1)?;
            (Arc::new(LinearModel::new(Link::Logistic, shapes, false)?), data)
        }
        "logistic" => {
            let recipe = SyntheticTask::Logistic {
                flip: t.flip.unwrap_or(0.0),
            };
            let (data, _) = make_synthetic(&recipe, seed.derive("task", 0), n, d)?;
            (Arc::new(LinearModel::vector(Link::Logistic, d)), data)
        }
        "least_squares" => {
            let recipe = SyntheticTask::LeastSquares {
                noise: t.noise.unwrap_or(0.1),
            };
            let (data, _) = make_synthetic(&recipe, seed.derive("task", 0), n, d)?;
            (Arc::new(LinearModel::vector(Link::Identity, d)), data)
        }
        "mlp" => {
            let [h1, h2] = t.hidden.unwrap_or([64, 32]);
            let recipe = SyntheticTask::Teacher {
                h1,
                h2,
                noise: t.noise.unwrap_or(0.1),
            };
            let (data, _) = make_synthetic(&recipe, seed.derive("task", 0), n, d)?;
            (Arc::new(TinyMlp::new(d, h1, h2)?), data)
        }
        "csv" => {
            let path = t.path.as_ref().context("task csv needs [task] path")?;
            let schema = CsvSchema {
                label: t.label.clone().unwrap_or_else(|| "label".into()),
                features: t.features.clone(),
            };
            let data = load_csv(path, &schema)?;
            let link = match t.link.as_deref().unwrap_or("logistic") {
                "logistic" => Link::Logistic,
                "identity" => Link::Identity,
                other => bail!("unknown link {other:?} (expected logistic or identity)"),
            };
            (Arc::new(LinearModel::vector(link, data.features())), data)
        }
        other => bail!("unknown task {other:?}"),
    };
    let init = oracle.init_params(seed);
    match t.lora_rank {
        None => Ok(BuiltTask { oracle, data, init }),
        Some(r) => {
            let (wrapped, adapters) = lora_wrap(oracle, init, r, seed.derive("lora", 0))?;
            Ok(BuiltTask {
                oracle: Arc::new(wrapped),
                data,
                init: adapters,
            })
        }
    }
}
