//! Rectified-flow regression and reflow.
//!
//! A velocity network is fit to the straight-line direction `x1 - x0` at
//! points `x_t = t * x1 + (1 - t) * x0` of a coupling, with `t ~ U[0, 1]`.
//! Reflow draws fresh source points, pushes them through the trained flow
//! and retrains on the resulting model-generated pairs.

use std::io::{self, Write};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::error::MlpError;
use crate::field::VelocityField;
use crate::format::fmt_f64;
use crate::grid::TimeGrid;
use crate::mixture::GaussianMixture;
use crate::mlp::{adam_step, Activation, Example, MlpParams, OptState};
use crate::solver::{integrate, SolveError, SolverKind};
use crate::state::StateVec;

/// Steps of the cached-midpoint solve used to generate reflow couplings.
pub const REFLOW_STEPS: usize = 100;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("training diverged at iteration {iteration} (loss {loss})")]
    Diverged { iteration: usize, loss: f64 },
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("invalid coupling: {0}")]
    Coupling(String),
    #[error(transparent)]
    Mlp(#[from] MlpError),
    #[error("coupling generation failed for sample {index}: {source}")]
    Generation { index: usize, source: SolveError },
}

/// Derives an independent stream seed from a master seed (SplitMix64).
pub fn derive_seed(master: u64, stream: u64) -> u64 {
    let mut z = master
        .wrapping_add(stream.wrapping_mul(0x9E37_79B9_7F4A_7C15))
        .wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    /// `x0` and `x1` drawn independently (1-rectified flow).
    Independent,
    /// `x1` obtained by integrating a trained flow from `x0` (reflow).
    ModelGenerated,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Coupling {
    pairs: Vec<(StateVec, StateVec)>,
    provenance: Provenance,
}

impl Coupling {
    pub fn new(
        pairs: Vec<(StateVec, StateVec)>,
        provenance: Provenance,
    ) -> Result<Self, TrainError> {
        let Some((first, _)) = pairs.first() else {
            return Err(TrainError::Coupling("coupling is empty".into()));
        };
        let dim = first.dim();
        if let Some(i) = pairs
            .iter()
            .position(|(a, b)| a.dim() != dim || b.dim() != dim)
        {
            return Err(TrainError::Coupling(format!(
                "pair {i} does not have dimension {dim}"
            )));
        }
        Ok(Self { pairs, provenance })
    }

    pub fn pairs(&self) -> &[(StateVec, StateVec)] {
        &self.pairs
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.pairs[0].0.dim()
    }

    pub fn provenance(&self) -> Provenance {
        self.provenance
    }

    /// CSV with columns `x0_0,x0_1,..,x1_0,x1_1,..`.
    pub fn write_csv<W: Write>(&self, mut w: W) -> io::Result<()> {
        let d = self.dim();
        let header: Vec<String> = (0..d)
            .map(|j| format!("x0_{j}"))
            .chain((0..d).map(|j| format!("x1_{j}")))
            .collect();
        writeln!(w, "{}", header.join(","))?;
        for (a, b) in &self.pairs {
            let row: Vec<String> = a
                .as_slice()
                .iter()
                .chain(b.as_slice())
                .map(|&v| fmt_f64(v))
                .collect();
            writeln!(w, "{}", row.join(","))?;
        }
        Ok(())
    }
}

/// `t * x1 + (1 - t) * x0`, exact at both ends.
pub fn interpolate(x0: &StateVec, x1: &StateVec, t: f64) -> StateVec {
    assert_eq!(x0.dim(), x1.dim(), "dimension mismatch");
    let out = if t == 0.0 {
        x0.as_slice().to_vec()
    } else if t == 1.0 {
        x1.as_slice().to_vec()
    } else {
        x0.as_slice()
            .iter()
            .zip(x1.as_slice())
            .map(|(a, b)| t * b + (1.0 - t) * a)
            .collect()
    };
    StateVec::new(out).expect("convex combination of finite points")
}

fn example(x0: &StateVec, x1: &StateVec, t: f64) -> Example {
    Example {
        x: interpolate(x0, x1, t).into_inner(),
        t,
        target: x1.sub(x0).into_inner(),
    }
}

/// Mean of `||(x1 - x0) - v(x_t, t)||^2` over paired samples and times.
pub fn flow_matching_loss(
    params: &MlpParams,
    pairs: &[(StateVec, StateVec)],
    times: &[f64],
) -> Result<f64, TrainError> {
    if pairs.len() != times.len() {
        return Err(TrainError::Config(format!(
            "{} pairs but {} times",
            pairs.len(),
            times.len()
        )));
    }
    if let Some(t) = times.iter().find(|t| !(0.0..=1.0).contains(*t)) {
        return Err(TrainError::Config(format!("time {t} outside [0, 1]")));
    }
    let batch: Vec<Example> = pairs
        .iter()
        .zip(times)
        .map(|((a, b), &t)| example(a, b, t))
        .collect();
    Ok(params.loss(&batch)?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub iterations: usize,
    pub learning_rate: f64,
    pub seed: u64,
    /// Hidden layer widths.
    pub hidden: Vec<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 256,
            iterations: 3000,
            learning_rate: 3e-3,
            seed: 1024,
            hidden: vec![64, 64, 64],
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        if self.batch_size == 0 || self.iterations == 0 {
            return Err(TrainError::Config(
                "batch size and iterations must be positive".into(),
            ));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(TrainError::Config("learning rate must be positive".into()));
        }
        if self.hidden.contains(&0) {
            return Err(TrainError::Config("hidden widths must be positive".into()));
        }
        Ok(())
    }
}

/// Where training pairs come from.
#[derive(Debug, Clone, Copy)]
pub enum CouplingSource<'a> {
    /// Fresh independent draws from source and target every batch.
    Independent {
        source: &'a GaussianMixture,
        target: &'a GaussianMixture,
    },
    /// Pairs resampled uniformly with replacement from a fixed coupling.
    Fixed(&'a Coupling),
}

impl CouplingSource<'_> {
    fn dim(&self) -> usize {
        match self {
            CouplingSource::Independent { .. } => 2,
            CouplingSource::Fixed(c) => c.dim(),
        }
    }

    fn draw<R: Rng>(&self, rng: &mut R) -> (StateVec, StateVec) {
        match self {
            CouplingSource::Independent { source, target } => {
                let x0 = source.sample_labeled(rng).1;
                let x1 = target.sample_labeled(rng).1;
                (x0, x1)
            }
            CouplingSource::Fixed(c) => c.pairs[rng.random_range(0..c.len())].clone(),
        }
    }

    /// A fixed evaluation batch, reproducible per seed.
    pub fn evaluation_batch(&self, n: usize, seed: u64) -> Vec<Example> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| {
                let (x0, x1) = self.draw(&mut rng);
                let t: f64 = rng.random();
                example(&x0, &x1, t)
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    pub params: MlpParams,
    /// Batch loss at every iteration, before that iteration's update.
    pub losses: Vec<f64>,
}

impl TrainOutcome {
    /// CSV with columns `iter,loss`.
    pub fn write_loss_csv<W: Write>(&self, mut w: W) -> io::Result<()> {
        writeln!(w, "iter,loss")?;
        for (i, l) in self.losses.iter().enumerate() {
            writeln!(w, "{i},{}", fmt_f64(*l))?;
        }
        Ok(())
    }
}

/// Trains a fresh Xavier-initialized network.
pub fn train_rectified_flow(
    config: &TrainConfig,
    source: CouplingSource<'_>,
) -> Result<TrainOutcome, TrainError> {
    config.validate()?;
    let layout = MlpParams::velocity_layout(source.dim(), &config.hidden);
    let init = MlpParams::xavier(layout, Activation::Tanh, derive_seed(config.seed, 0))?;
    train_from(init, config, source)
}

/// Continues training `params` with Adam on batches from `source`.
pub fn train_from(
    mut params: MlpParams,
    config: &TrainConfig,
    source: CouplingSource<'_>,
) -> Result<TrainOutcome, TrainError> {
    config.validate()?;
    if params.state_dim() != source.dim() {
        return Err(TrainError::Config(format!(
            "network acts on dimension {}, coupling has dimension {}",
            params.state_dim(),
            source.dim()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, 1));
    let mut opt = OptState::new(&params, config.learning_rate);
    let mut losses = Vec::with_capacity(config.iterations);
    let mut batch = Vec::with_capacity(config.batch_size);

    for iteration in 0..config.iterations {
        batch.clear();
        for _ in 0..config.batch_size {
            let (x0, x1) = source.draw(&mut rng);
            let t: f64 = rng.random();
            batch.push(example(&x0, &x1, t));
        }
        let grad = params.gradient(&batch)?;
        if !grad.loss.is_finite() || grad.values.iter().any(|g| !g.is_finite()) {
            return Err(TrainError::Diverged {
                iteration,
                loss: grad.loss,
            });
        }
        losses.push(grad.loss);
        adam_step(&mut params, &grad.values, &mut opt)?;
    }
    if let Some(i) = params.params().iter().position(|p| !p.is_finite()) {
        return Err(MlpError::NonFiniteParameter(i).into());
    }
    Ok(TrainOutcome { params, losses })
}

/// Pairs each start point with its image under the flow of `field` over
/// [0, 1], integrated with `steps` cached-midpoint steps.
pub fn generate_coupling<F: VelocityField + ?Sized>(
    field: &F,
    starts: Vec<StateVec>,
    steps: usize,
) -> Result<Coupling, TrainError> {
    let grid = TimeGrid::uniform(steps).map_err(|e| TrainError::Config(e.to_string()))?;
    let ends: Vec<Result<StateVec, TrainError>> = starts
        .par_iter()
        .enumerate()
        .map(|(index, x0)| {
            integrate(field, x0, &grid, SolverKind::FireFlow)
                .map(|traj| traj.last().clone())
                .map_err(|source| TrainError::Generation { index, source })
        })
        .collect();
    let pairs = starts
        .into_iter()
        .zip(ends)
        .map(|(x0, x1)| x1.map(|x1| (x0, x1)))
        .collect::<Result<Vec<_>, _>>()?;
    Coupling::new(pairs, Provenance::ModelGenerated)
}

#[derive(Debug, Clone)]
pub struct ReflowOutcome {
    pub coupling: Coupling,
    pub training: TrainOutcome,
}

/// Builds a model-generated coupling of `pairs` points from a trained
/// 1-rectified flow and retrains on it, starting from the given weights.
pub fn reflow(
    params: &MlpParams,
    config: &TrainConfig,
    source: &GaussianMixture,
    pairs: usize,
) -> Result<ReflowOutcome, TrainError> {
    config.validate()?;
    if pairs == 0 {
        return Err(TrainError::Config("reflow needs at least one pair".into()));
    }
    let starts = source.sample(pairs, derive_seed(config.seed, 2));
    let coupling = generate_coupling(params, starts, REFLOW_STEPS)?;
    let training = train_from(params.clone(), config, CouplingSource::Fixed(&coupling))?;
    Ok(ReflowOutcome { coupling, training })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::field::AnalyticField;
    use crate::mixture::MixtureSpec;

    fn sv(v: &[f64]) -> StateVec {
        StateVec::new(v.to_vec()).unwrap()
    }

    #[test]
    fn interpolate_examples() {
        let a = sv(&[0.1, -7.3]);
        let b = sv(&[2.9, 4.4]);
        assert_eq!(interpolate(&a, &b, 0.0), a);
        assert_eq!(interpolate(&a, &b, 1.0), b);
        assert_eq!(
            interpolate(&sv(&[0.0, 0.0]), &sv(&[2.0, 4.0]), 0.25),
            sv(&[0.5, 1.0])
        );
    }

    #[test]
    fn loss_is_zero_when_network_outputs_the_direction() {
        // A constant network output c makes the loss vanish on pairs with x1 - x0 = c.
        let mut p = MlpParams::zeros(vec![3, 4, 2], Activation::Tanh).unwrap();
        p.set_layer(1, &[0.0; 8], &[1.5, -2.0]);
        let pairs = vec![
            (sv(&[0.0, 0.0]), sv(&[1.5, -2.0])),
            (sv(&[3.0, 1.0]), sv(&[4.5, -1.0])),
        ];
        assert_eq!(flow_matching_loss(&p, &pairs, &[0.2, 0.9]).unwrap(), 0.0);
    }

    #[test]
    fn zero_network_loss_is_squared_distance() {
        let p = MlpParams::zeros(vec![3, 4, 2], Activation::Tanh).unwrap();
        let pairs = vec![
            (sv(&[0.0, 0.0]), sv(&[2.0, 0.0])),
            (sv(&[1.0, 1.0]), sv(&[1.0, -1.0])),
        ];
        assert_eq!(flow_matching_loss(&p, &pairs, &[0.3, 0.6]).unwrap(), 4.0);
    }

    #[test]
    fn loss_matches_per_sample_loop() {
        let p = MlpParams::xavier(vec![3, 16, 16, 2], Activation::Tanh, 5).unwrap();
        let src = MixtureSpec::default_source().build().unwrap();
        let tgt = MixtureSpec::default_target().build().unwrap();
        let x0 = src.sample(64, 1);
        let x1 = tgt.sample(64, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let times: Vec<f64> = (0..64).map(|_| rng.random()).collect();
        let pairs: Vec<_> = x0.into_iter().zip(x1).collect();

        let mut total = 0.0;
        for ((a, b), &t) in pairs.iter().zip(&times) {
            let xt = [t * b[0] + (1.0 - t) * a[0], t * b[1] + (1.0 - t) * a[1]];
            let v = p.forward(&xt, t).unwrap();
            total += (b[0] - a[0] - v[0]).powi(2) + (b[1] - a[1] - v[1]).powi(2);
        }
        let oracle = total / 64.0;
        let loss = flow_matching_loss(&p, &pairs, &times).unwrap();
        assert!(
            (loss - oracle).abs() <= 1e-12 * oracle,
            "{loss} vs {oracle}"
        );
        assert!(loss >= 0.0);
    }

    #[test]
    fn loss_rejects_bad_times() {
        let p = MlpParams::zeros(vec![3, 4, 2], Activation::Tanh).unwrap();
        let pairs = vec![(sv(&[0.0, 0.0]), sv(&[1.0, 0.0]))];
        assert!(flow_matching_loss(&p, &pairs, &[1.5]).is_err());
        assert!(flow_matching_loss(&p, &pairs, &[]).is_err());
    }

    #[test]
    fn coupling_validation_and_csv() {
        assert!(Coupling::new(vec![], Provenance::Independent).is_err());
        assert!(
            Coupling::new(vec![(sv(&[0.0]), sv(&[1.0, 2.0]))], Provenance::Independent).is_err()
        );
        let c = Coupling::new(
            vec![(sv(&[0.5, 1.0]), sv(&[2.0, -3.0]))],
            Provenance::Independent,
        )
        .unwrap();
        let mut buf = Vec::new();
        c.write_csv(&mut buf).unwrap();
        assert_eq!(
            String::from_utf8(buf).unwrap(),
            "x0_0,x0_1,x1_0,x1_1\n0.5,1,2,-3\n"
        );
    }

    #[test]
    fn constant_field_coupling_is_a_translation() {
        let field = AnalyticField::constant(vec![3.0, -1.0]).unwrap();
        let starts = MixtureSpec::default_source().build().unwrap().sample(50, 4);
        let c = generate_coupling(&field, starts.clone(), REFLOW_STEPS).unwrap();
        assert_eq!(c.len(), 50);
        assert_eq!(c.provenance(), Provenance::ModelGenerated);
        for (a, b) in c.pairs() {
            let d = b.sub(a);
            assert!((d[0] - 3.0).abs() < 1e-12 && (d[1] + 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn rejects_invalid_configs() {
        let src = MixtureSpec::default_source().build().unwrap();
        let tgt = MixtureSpec::default_target().build().unwrap();
        let source = CouplingSource::Independent {
            source: &src,
            target: &tgt,
        };
        for cfg in [
            TrainConfig {
                batch_size: 0,
                ..TrainConfig::default()
            },
            TrainConfig {
                iterations: 0,
                ..TrainConfig::default()
            },
            TrainConfig {
                learning_rate: -1.0,
                ..TrainConfig::default()
            },
            TrainConfig {
                hidden: vec![8, 0],
                ..TrainConfig::default()
            },
        ] {
            assert!(matches!(
                train_rectified_flow(&cfg, source),
                Err(TrainError::Config(_))
            ));
        }
    }

    #[test]
    fn divergence_reports_iteration() {
        let src = MixtureSpec::default_source().build().unwrap();
        let tgt = MixtureSpec::default_target().build().unwrap();
        let cfg = TrainConfig {
            batch_size: 8,
            iterations: 200,
            learning_rate: 1e300,
            hidden: vec![4],
            ..TrainConfig::default()
        };
        let err = train_rectified_flow(
            &cfg,
            CouplingSource::Independent {
                source: &src,
                target: &tgt,
            },
        );
        assert!(
            matches!(
                err,
                Err(TrainError::Diverged { .. }) | Err(TrainError::Mlp(_))
            ),
            "{err:?}"
        );
    }

    #[test]
    fn short_training_is_deterministic_and_reduces_loss() {
        let src = MixtureSpec::default_source().build().unwrap();
        let tgt = MixtureSpec::default_target().build().unwrap();
        let source = CouplingSource::Independent {
            source: &src,
            target: &tgt,
        };
        let cfg = TrainConfig {
            batch_size: 64,
            iterations: 300,
            hidden: vec![32, 32],
            ..TrainConfig::default()
        };
        let a = train_rectified_flow(&cfg, source).unwrap();
        let b = train_rectified_flow(&cfg, source).unwrap();
        assert_eq!(a.params.to_json(), b.params.to_json());
        assert_eq!(a.losses, b.losses);
        let eval = source.evaluation_batch(512, 77);
        let init = MlpParams::xavier(
            a.params.layer_sizes().to_vec(),
            Activation::Tanh,
            derive_seed(cfg.seed, 0),
        )
        .unwrap();
        assert!(a.params.loss(&eval).unwrap() < 0.5 * init.loss(&eval).unwrap());
    }

    #[test]
    fn derived_seeds_differ() {
        assert_ne!(derive_seed(1, 0), derive_seed(1, 1));
        assert_ne!(derive_seed(1, 0), derive_seed(2, 0));
        assert_eq!(derive_seed(5, 3), derive_seed(5, 3));
    }
}
