//! On-surface feature aggregation: combining the features of every source
//! ray that sees a surface point into one feature for the target ray.
//!
//! All variants run batched: the rays of many surface points are stacked
//! into one table with per-point segments, and per-point results come out
//! as rows. Rays inside a segment must be in canonical order (see
//! [`RayFeatureSet::canonicalize`]); with that, every reduction has a fixed
//! order and results are bit-identical under any permutation of the input.

use std::cmp::Ordering;
use std::fmt;
use std::str::FromStr;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, TensorError};
use crate::geometry::{RaySkeleton, Vec3};
use crate::nn::{Activation, AttentionGraph, Gat, GatConfig, Mlp, MlpConfig};
use crate::tensor::{ParamBinding, ParameterStore, Scalar, Tape, Tensor, Var};

/// Total weight below which the weighted mean falls back to zero.
pub const WEIGHT_EPSILON: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    WeightedMean,
    Mlp,
    Gat,
    GatReadout,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Pool {
    Mean,
    Max,
}

impl Variant {
    pub const ALL: [Variant; 4] = [Variant::WeightedMean, Variant::Mlp, Variant::Gat, Variant::GatReadout];

    pub fn uses_pool(self) -> bool {
        matches!(self, Variant::Mlp | Variant::Gat)
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Variant::WeightedMean => "weighted-mean",
            Variant::Mlp => "mlp",
            Variant::Gat => "gat",
            Variant::GatReadout => "gat-readout",
        })
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self, Error> {
        Variant::ALL
            .into_iter()
            .find(|v| v.to_string() == s)
            .ok_or_else(|| Error::Config(format!("unknown aggregator variant `{s}`")))
    }
}

impl fmt::Display for Pool {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Pool::Mean => "mean",
            Pool::Max => "max",
        })
    }
}

impl FromStr for Pool {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self, Error> {
        match s {
            "mean" => Ok(Pool::Mean),
            "max" => Ok(Pool::Max),
            _ => Err(Error::Config(format!("unknown aggregator pool `{s}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AggregatorConfig {
    pub variant: Variant,
    /// Present exactly for the `mlp` and `gat` variants.
    pub pool: Option<Pool>,
    pub feature_width: usize,
    pub mlp_hidden: Vec<usize>,
    pub gat_heads: usize,
    pub gat_layers: usize,
    pub gat_slope: f64,
}

impl AggregatorConfig {
    pub fn new(variant: Variant, pool: Option<Pool>, feature_width: usize) -> Self {
        Self {
            variant,
            pool,
            feature_width,
            mlp_hidden: vec![64, 64],
            gat_heads: 2,
            gat_layers: 1,
            gat_slope: 0.2,
        }
    }

    /// The pool a variant takes by default: mean where pooling applies.
    pub fn with_default_pool(variant: Variant, feature_width: usize) -> Self {
        Self::new(variant, variant.uses_pool().then_some(Pool::Mean), feature_width)
    }

    pub fn validate(&self) -> Result<(), Error> {
        if self.variant.uses_pool() != self.pool.is_some() {
            return Err(Error::Config(format!(
                "aggregator.pool must be set exactly for mlp and gat variants (variant {}, pool {:?})",
                self.variant, self.pool
            )));
        }
        if self.feature_width == 0 {
            return Err(Error::Config("feature width must be positive".into()));
        }
        if matches!(self.variant, Variant::Gat | Variant::GatReadout) {
            self.gat_config().validate()?;
        }
        Ok(())
    }

    pub fn mlp_config(&self) -> MlpConfig {
        let mut widths = vec![self.feature_width + 6];
        widths.extend(&self.mlp_hidden);
        widths.push(self.feature_width);
        MlpConfig {
            widths,
            activation: Activation::Relu,
        }
    }

    pub fn gat_config(&self) -> GatConfig {
        let in_width = match self.variant {
            Variant::GatReadout => self.feature_width + 3,
            _ => self.feature_width + 6,
        };
        GatConfig {
            in_width,
            width: self.feature_width,
            heads: self.gat_heads,
            slope: self.gat_slope,
            layers: self.gat_layers,
        }
    }
}

impl Default for AggregatorConfig {
    fn default() -> Self {
        Self::new(Variant::Mlp, Some(Pool::Mean), 32)
    }
}

/// The rays that see one surface point, with their sampled features.
#[derive(Clone, Debug, PartialEq)]
pub struct RayFeatureSet {
    pub sources: Vec<usize>,
    /// Unit directions from each source center toward the point.
    pub directions: Vec<Vec3>,
    pub features: Vec<Vec<f32>>,
    /// Unit direction from the target center toward the point.
    pub target: Vec3,
}

impl RayFeatureSet {
    pub fn len(&self) -> usize {
        self.sources.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sources.is_empty()
    }

    pub fn validate(&self, width: usize) -> Result<(), Error> {
        let k = self.sources.len();
        if self.directions.len() != k || self.features.len() != k {
            return Err(Error::Invalid(format!(
                "ray set lists disagree: {k} sources, {} directions, {} features",
                self.directions.len(),
                self.features.len()
            )));
        }
        let unit = |v: &Vec3| (v.norm() - 1.0).abs() <= 1e-6;
        if !unit(&self.target) || !self.directions.iter().all(unit) {
            return Err(Error::Invalid("ray directions must be unit vectors".into()));
        }
        if let Some(f) = self.features.iter().find(|f| f.len() != width) {
            return Err(Error::Invalid(format!(
                "feature of width {} where {width} expected",
                f.len()
            )));
        }
        Ok(())
    }

    /// Sorts rays by source index, then direction, then feature values under
    /// the IEEE total order.
    pub fn canonicalize(&mut self) {
        let mut order: Vec<usize> = (0..self.len()).collect();
        order.sort_by(|&a, &b| {
            self.sources[a]
                .cmp(&self.sources[b])
                .then_with(|| cmp_lex(self.directions[a].iter().copied(), self.directions[b].iter().copied()))
                .then_with(|| {
                    cmp_lex(
                        self.features[a].iter().map(|v| *v as f64),
                        self.features[b].iter().map(|v| *v as f64),
                    )
                })
        });
        self.sources = order.iter().map(|&i| self.sources[i]).collect();
        self.directions = order.iter().map(|&i| self.directions[i]).collect();
        self.features = order.iter().map(|&i| self.features[i].clone()).collect();
    }
}

fn cmp_lex(a: impl Iterator<Item = f64>, b: impl Iterator<Item = f64>) -> Ordering {
    a.zip(b)
        .map(|(x, y)| x.total_cmp(&y))
        .find(|o| o.is_ne())
        .unwrap_or(Ordering::Equal)
}

#[derive(Clone, Debug, PartialEq)]
pub struct AggregatedFeature {
    pub g: Vec<f32>,
    /// Number of contributing rays.
    pub count: usize,
}

/// Ray tables for a batch of surface points.
///
/// Output row `segment_rows[s]` aggregates rays `offsets[s]..offsets[s + 1]`;
/// rows without a segment have no rays and aggregate to zero.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct RayBatch {
    pub rows: usize,
    pub segment_rows: Vec<usize>,
    pub offsets: Vec<usize>,
    pub targets: Vec<Vec3>,
    pub directions: Vec<Vec3>,
    pub sources: Vec<usize>,
    /// Continuous pixel location of each ray in its source image.
    pub pixels: Vec<[f64; 2]>,
}

impl RayBatch {
    pub fn new(rows: usize) -> Self {
        Self {
            rows,
            offsets: vec![0],
            ..Default::default()
        }
    }

    pub fn num_rays(&self) -> usize {
        self.sources.len()
    }

    pub fn num_segments(&self) -> usize {
        self.segment_rows.len()
    }

    /// Adds the rays of output row `row`. Empty skeletons add nothing.
    pub fn push(&mut self, row: usize, target: Vec3, rays: &RaySkeleton) {
        if rays.indices.is_empty() {
            return;
        }
        debug_assert!(row < self.rows && self.segment_rows.last().is_none_or(|&r| r < row));
        self.segment_rows.push(row);
        self.targets.push(target);
        self.sources.extend(&rays.indices);
        self.directions.extend(&rays.directions);
        self.pixels.extend(rays.pixels.iter().map(|p| [p.x, p.y]));
        self.offsets.push(self.sources.len());
    }

    /// Per-ray counts for every output row.
    pub fn counts(&self) -> Vec<usize> {
        let mut out = vec![0; self.rows];
        for (s, &row) in self.segment_rows.iter().enumerate() {
            out[row] = self.offsets[s + 1] - self.offsets[s];
        }
        out
    }

    fn segment_of_ray(&self) -> Vec<usize> {
        let mut out = Vec::with_capacity(self.num_rays());
        for (s, w) in self.offsets.windows(2).enumerate() {
            out.extend(std::iter::repeat_n(s, w[1] - w[0]));
        }
        out
    }

    /// Normalized weights `max(0, u·v_k) / W` per ray, zero when `W` is below
    /// [`WEIGHT_EPSILON`].
    pub fn mean_weights(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_rays());
        for (s, w) in self.offsets.windows(2).enumerate() {
            let raw: Vec<f64> = (w[0]..w[1])
                .map(|r| self.targets[s].dot(&self.directions[r]).max(0.0))
                .collect();
            let total: f64 = raw.iter().sum();
            if total < WEIGHT_EPSILON {
                out.extend(std::iter::repeat_n(0.0, raw.len()));
            } else {
                out.extend(raw.iter().map(|v| v / total));
            }
        }
        out
    }
}

fn vec3_table<T: Scalar>(rows: &[Vec3]) -> Tensor<T> {
    Tensor::from_fn(&[rows.len(), 3], |i| T::from_f64(rows[i / 3][i % 3]))
}

/// Aggregation operator with its parameters stored under `aggr.`.
#[derive(Clone, Debug)]
pub struct Aggregator {
    pub config: AggregatorConfig,
}

impl Aggregator {
    pub const PREFIX: &'static str = "aggr";

    pub fn new(config: AggregatorConfig) -> Result<Self, Error> {
        config.validate()?;
        Ok(Self { config })
    }

    fn mlp(&self) -> Mlp {
        Mlp::new(format!("{}.mlp", Self::PREFIX), self.config.mlp_config())
    }

    fn gat(&self) -> Gat {
        Gat::new(format!("{}.gat", Self::PREFIX), self.config.gat_config())
    }

    pub fn init(&self, store: &mut ParameterStore, rng: &mut ChaCha8Rng) -> Result<(), TensorError> {
        match self.config.variant {
            Variant::WeightedMean => Ok(()),
            Variant::Mlp => self.mlp().init(store, rng),
            Variant::Gat | Variant::GatReadout => self.gat().init(store, rng),
        }
    }

    /// Aggregates `features` (one row per ray of `batch`) into a
    /// `batch.rows`×C table.
    pub fn forward<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        p: &ParamBinding,
        batch: &RayBatch,
        features: Var,
    ) -> Result<Var, Error> {
        let c = self.config.feature_width;
        let shape = tape.shape(features).to_vec();
        if batch.num_rays() == 0 {
            if shape.first().is_some_and(|&n| n != 0) {
                return Err(TensorError::ShapeMismatch {
                    op: "aggregate",
                    lhs: shape,
                    rhs: vec![0, c],
                }
                .into());
            }
            return Ok(tape.constant(Tensor::zeros(&[batch.rows.max(1), c])));
        }
        if shape != [batch.num_rays(), c] {
            return Err(TensorError::ShapeMismatch {
                op: "aggregate",
                lhs: shape,
                rhs: vec![batch.num_rays(), c],
            }
            .into());
        }
        let per_segment = match self.config.variant {
            Variant::WeightedMean => self.weighted_mean(tape, batch, features)?,
            Variant::Mlp => {
                let x = self.node_inputs(tape, batch, features)?;
                let y = self.mlp().forward(tape, p, x)?;
                self.pool(tape, y, batch.offsets.clone())?
            }
            Variant::Gat => {
                let x = self.node_inputs(tape, batch, features)?;
                let graph = AttentionGraph::complete(&batch.offsets);
                let y = self.gat().forward(tape, p, x, &graph, &graph)?;
                self.pool(tape, y, batch.offsets.clone())?
            }
            Variant::GatReadout => self.gat_readout(tape, p, batch, features)?,
        };
        if batch.num_segments() == batch.rows && batch.segment_rows.iter().enumerate().all(|(i, r)| i == *r) {
            return Ok(per_segment);
        }
        Ok(tape.scatter_rows(per_segment, batch.segment_rows.clone(), batch.rows)?)
    }

    fn weighted_mean<T: Scalar>(&self, tape: &mut Tape<T>, batch: &RayBatch, features: Var) -> Result<Var, TensorError> {
        let w = batch.mean_weights();
        let wv = tape.constant(Tensor::from_fn(&[w.len()], |i| T::from_f64(w[i])));
        let scaled = tape.scale_rows(features, wv)?;
        tape.segment_sum(scaled, batch.offsets.clone())
    }

    /// Rows `[u, v_k, f_k]`.
    fn node_inputs<T: Scalar>(&self, tape: &mut Tape<T>, batch: &RayBatch, features: Var) -> Result<Var, TensorError> {
        let seg = batch.segment_of_ray();
        let u: Vec<Vec3> = seg.iter().map(|&s| batch.targets[s]).collect();
        let uv = tape.constant(vec3_table(&u));
        let vv = tape.constant(vec3_table(&batch.directions));
        tape.concat(&[uv, vv, features], 1)
    }

    fn pool<T: Scalar>(&self, tape: &mut Tape<T>, x: Var, offsets: Vec<usize>) -> Result<Var, TensorError> {
        match self.config.pool {
            Some(Pool::Max) => tape.segment_max(x, offsets),
            _ => tape.segment_mean(x, offsets),
        }
    }

    /// Target node `[u, g']` followed by source nodes `[v_k, f_k]` per segment,
    /// read out at the target node.
    fn gat_readout<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        p: &ParamBinding,
        batch: &RayBatch,
        features: Var,
    ) -> Result<Var, TensorError> {
        let init = self.weighted_mean(tape, batch, features)?;
        let uv = tape.constant(vec3_table(&batch.targets));
        let target_nodes = tape.concat(&[uv, init], 1)?;
        let vv = tape.constant(vec3_table(&batch.directions));
        let source_nodes = tape.concat(&[vv, features], 1)?;
        let stacked = tape.concat(&[target_nodes, source_nodes], 0)?;
        let segments = batch.num_segments();
        let mut order = Vec::with_capacity(segments + batch.num_rays());
        let mut graph_offsets = vec![0];
        for (s, w) in batch.offsets.windows(2).enumerate() {
            order.push(s);
            order.extend((w[0]..w[1]).map(|r| segments + r));
            graph_offsets.push(order.len());
        }
        let nodes = tape.gather_rows(stacked, order)?;
        let complete = AttentionGraph::complete(&graph_offsets);
        let readout = AttentionGraph::readout(&graph_offsets);
        self.gat().forward(tape, p, nodes, &complete, &readout)
    }
}

/// Aggregates one ray set. The set is canonicalized first, so the result
/// does not depend on the order of its rays.
pub fn aggregate(aggregator: &Aggregator, params: &ParameterStore, rays: &RayFeatureSet) -> Result<AggregatedFeature, Error> {
    let c = aggregator.config.feature_width;
    rays.validate(c)?;
    if rays.is_empty() {
        return Ok(AggregatedFeature {
            g: vec![0.0; c],
            count: 0,
        });
    }
    let mut rays = rays.clone();
    rays.canonicalize();
    let mut batch = RayBatch::new(1);
    batch.push(
        0,
        rays.target,
        &RaySkeleton {
            indices: rays.sources.clone(),
            directions: rays.directions.clone(),
            pixels: vec![nalgebra::Vector2::zeros(); rays.len()],
        },
    );
    let mut tape = Tape::<f32>::new();
    let p = ParamBinding::bind(&mut tape, params, |_| false);
    let f = tape.constant(Tensor::from_fn(&[rays.len(), c], |i| rays.features[i / c][i % c]));
    let g = aggregator.forward(&mut tape, &p, &batch, f)?;
    Ok(AggregatedFeature {
        g: tape.value(g).data().to_vec(),
        count: rays.len(),
    })
}

/// The cosine-weighted mean of `width`-channel ray features.
pub fn aggregate_weighted_mean(rays: &RayFeatureSet, width: usize) -> Result<AggregatedFeature, Error> {
    let agg = Aggregator::new(AggregatorConfig::new(Variant::WeightedMean, None, width))?;
    aggregate(&agg, &ParameterStore::new(), rays)
}
