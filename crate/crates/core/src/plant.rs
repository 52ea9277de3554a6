//! Simulated hovercraft plants and the disturbance observer.

use nalgebra::{SMatrix, SVector};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{AgentModel, ExtendedState, Input, Output, State, EXTENDED_DIM, INPUT_DIM, OUTPUT_DIM, STATE_DIM};

type ExtMatrix = SMatrix<f64, EXTENDED_DIM, EXTENDED_DIM>;
type ExtVector = SVector<f64, EXTENDED_DIM>;
type OutputMatrix = SMatrix<f64, OUTPUT_DIM, EXTENDED_DIM>;
type OutputCov = SMatrix<f64, OUTPUT_DIM, OUTPUT_DIM>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PlantError {
    #[error("non-finite input")]
    NonFiniteInput,
    #[error("estimator covariance lost positive definiteness")]
    CovarianceNotPd,
    #[error("invalid noise setting: {0}")]
    InvalidNoise(String),
}

/// True physical state of one agent.
#[derive(Debug, Clone, PartialEq)]
pub struct PlantState {
    pub state: State,
    pub disturbance: Input,
    pub applied: Vec<Input>,
}

impl PlantState {
    pub fn new(state: State, disturbance: Input) -> Self {
        Self { state, disturbance, applied: Vec::new() }
    }

    pub fn position(&self) -> [f64; 2] {
        [self.state[0], self.state[1]]
    }
}

/// `x⁺ = A x + B (u + d)`, plus zero-mean velocity noise when
/// `process_std > 0`.
pub fn plant_step<R: Rng>(model: &AgentModel, plant: &mut PlantState, input: &Input, process_std: f64, rng: &mut R) -> Result<(), PlantError> {
    if !input.iter().all(|v| v.is_finite()) {
        return Err(PlantError::NonFiniteInput);
    }
    let mut next = model.step(&plant.state, input, &plant.disturbance);
    if process_std > 0.0 {
        let normal = Normal::new(0.0, process_std).map_err(|e| PlantError::InvalidNoise(e.to_string()))?;
        for c in 3..STATE_DIM {
            next[c] += normal.sample(rng);
        }
    }
    plant.state = next;
    plant.applied.push(*input);
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeasurementNoise {
    /// Position standard deviation in meters.
    pub position_std: f64,
    /// Yaw standard deviation in radians.
    pub yaw_std: f64,
}

impl Default for MeasurementNoise {
    fn default() -> Self {
        Self { position_std: 1e-3, yaw_std: 2e-3 }
    }
}

impl MeasurementNoise {
    pub fn none() -> Self {
        Self { position_std: 0.0, yaw_std: 0.0 }
    }

    pub fn validate(&self) -> Result<(), PlantError> {
        if self.position_std >= 0.0 && self.yaw_std >= 0.0 {
            Ok(())
        } else {
            Err(PlantError::InvalidNoise("standard deviations must be nonnegative".into()))
        }
    }
}

/// Position and yaw with additive Gaussian noise.
pub fn measure<R: Rng>(plant: &PlantState, noise: &MeasurementNoise, rng: &mut R) -> Output {
    let mut y = Output::new(plant.state[0], plant.state[1], plant.state[2]);
    let stds = [noise.position_std, noise.position_std, noise.yaw_std];
    for (c, &s) in stds.iter().enumerate() {
        if s > 0.0 {
            let z: f64 = rand_distr::StandardNormal.sample(rng);
            y[c] += s * z;
        }
    }
    y
}

/// Observer tuning. Process noise acts on velocities and disturbances.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EstimatorSettings {
    /// Velocity process noise density, (m/s)/√s.
    pub velocity_noise: f64,
    /// Disturbance random-walk density, (m/s²)/√s.
    pub disturbance_noise: f64,
    /// Assumed measurement noise; must be positive.
    pub measurement: MeasurementNoise,
    /// Initial disturbance standard deviation.
    pub initial_disturbance_std: f64,
}

impl Default for EstimatorSettings {
    fn default() -> Self {
        Self {
            velocity_noise: 0.02,
            disturbance_noise: 0.1,
            measurement: MeasurementNoise::default(),
            initial_disturbance_std: 1.0,
        }
    }
}

/// Kalman filter on the state augmented with a constant input disturbance.
#[derive(Debug, Clone, PartialEq)]
pub struct Estimator {
    mean: ExtVector,
    covariance: ExtMatrix,
    transition: ExtMatrix,
    input_matrix: SMatrix<f64, EXTENDED_DIM, INPUT_DIM>,
    output: OutputMatrix,
    process: ExtMatrix,
    measurement: OutputCov,
}

impl Estimator {
    pub fn new(model: &AgentModel, initial: &ExtendedState, settings: &EstimatorSettings) -> Result<Self, PlantError> {
        let m = settings.measurement;
        if !(m.position_std > 0.0 && m.yaw_std > 0.0) {
            return Err(PlantError::InvalidNoise("assumed measurement noise must be positive".into()));
        }
        if !(settings.velocity_noise >= 0.0 && settings.disturbance_noise >= 0.0 && settings.initial_disturbance_std > 0.0) {
            return Err(PlantError::InvalidNoise("process noise must be nonnegative".into()));
        }
        let mut transition = ExtMatrix::identity();
        transition.fixed_view_mut::<STATE_DIM, STATE_DIM>(0, 0).copy_from(&model.a);
        transition.fixed_view_mut::<STATE_DIM, INPUT_DIM>(0, STATE_DIM).copy_from(&model.b);
        let mut input_matrix = SMatrix::<f64, EXTENDED_DIM, INPUT_DIM>::zeros();
        input_matrix.fixed_view_mut::<STATE_DIM, INPUT_DIM>(0, 0).copy_from(&model.b);
        let mut output = OutputMatrix::zeros();
        for c in 0..OUTPUT_DIM {
            output[(c, c)] = 1.0;
        }
        let mut process = ExtMatrix::zeros();
        for c in 3..STATE_DIM {
            process[(c, c)] = settings.velocity_noise.powi(2) * model.dt;
        }
        for c in STATE_DIM..EXTENDED_DIM {
            process[(c, c)] = settings.disturbance_noise.powi(2) * model.dt;
        }
        let measurement = OutputCov::from_diagonal(&SVector::<f64, OUTPUT_DIM>::new(m.position_std.powi(2), m.position_std.powi(2), m.yaw_std.powi(2)));
        let mut covariance = ExtMatrix::zeros();
        for c in 0..OUTPUT_DIM {
            covariance[(c, c)] = measurement[(c, c)];
        }
        for c in OUTPUT_DIM..STATE_DIM {
            covariance[(c, c)] = 1e-4;
        }
        for c in STATE_DIM..EXTENDED_DIM {
            covariance[(c, c)] = settings.initial_disturbance_std.powi(2);
        }
        Ok(Self { mean: initial.to_vector(), covariance, transition, input_matrix, output, process, measurement })
    }

    pub fn estimate(&self) -> ExtendedState {
        ExtendedState::from_vector(&self.mean)
    }

    pub fn covariance(&self) -> &ExtMatrix {
        &self.covariance
    }

    /// Time update with the input applied over the last interval.
    pub fn predict(&mut self, input: &Input) {
        self.mean = self.transition * self.mean + self.input_matrix * input;
        let p = self.transition * self.covariance * self.transition.transpose() + self.process;
        self.covariance = 0.5 * (p + p.transpose());
    }

    /// Measurement update in Joseph form. Returns the innovation.
    pub fn update(&mut self, y: &Output) -> Result<Output, PlantError> {
        let innovation = y - self.output * self.mean;
        let s = self.output * self.covariance * self.output.transpose() + self.measurement;
        let s_inv = s.cholesky().ok_or(PlantError::CovarianceNotPd)?.inverse();
        let gain = self.covariance * self.output.transpose() * s_inv;
        self.mean += gain * innovation;
        let i_kc = ExtMatrix::identity() - gain * self.output;
        let p = i_kc * self.covariance * i_kc.transpose() + gain * self.measurement * gain.transpose();
        let p = 0.5 * (p + p.transpose());
        if p.cholesky().is_none() {
            return Err(PlantError::CovarianceNotPd);
        }
        self.covariance = p;
        Ok(innovation)
    }
}

/// Predict with the applied input, then update with the new measurement.
pub fn ekf_step(est: &mut Estimator, applied: &Input, y: &Output) -> Result<Output, PlantError> {
    est.predict(applied);
    est.update(y)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn model() -> AgentModel {
        AgentModel::new(0.05).unwrap()
    }

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(11)
    }

    #[test]
    fn plant_examples() {
        let m = model();
        let mut p = PlantState::new(State::zeros(), Input::zeros());
        plant_step(&m, &mut p, &Input::zeros(), 0.0, &mut rng()).unwrap();
        assert_eq!(p.state, State::zeros());
        plant_step(&m, &mut p, &Input::new(1.0, 0.0, 0.0), 0.0, &mut rng()).unwrap();
        assert!((p.state[0] - 0.00125).abs() < 1e-15 && (p.state[3] - 0.05).abs() < 1e-15);
        let mut q = PlantState::new(State::zeros(), Input::new(1.0, 0.0, 0.0));
        plant_step(&m, &mut q, &Input::zeros(), 0.0, &mut rng()).unwrap();
        let mut r = PlantState::new(State::zeros(), Input::zeros());
        plant_step(&m, &mut r, &Input::new(1.0, 0.0, 0.0), 0.0, &mut rng()).unwrap();
        assert_eq!(q.state, r.state);
        assert!(plant_step(&m, &mut r, &Input::new(f64::NAN, 0.0, 0.0), 0.0, &mut rng()).is_err());
    }

    #[test]
    fn plant_matches_prediction_model() {
        let m = model();
        let x = State::from_column_slice(&[0.1, -0.2, 0.3, 0.4, -0.5, 0.6]);
        let u = Input::new(0.7, -0.8, 0.9);
        let mut p = PlantState::new(x, Input::zeros());
        plant_step(&m, &mut p, &u, 0.0, &mut rng()).unwrap();
        assert_eq!(p.state, m.a * x + m.b * u);
    }

    #[test]
    fn measurement_examples() {
        let p = PlantState::new(State::from_column_slice(&[0.1, 0.2, 0.3, 1.0, 1.0, 1.0]), Input::zeros());
        assert_eq!(measure(&p, &MeasurementNoise::none(), &mut rng()), Output::new(0.1, 0.2, 0.3));
        let a = measure(&p, &MeasurementNoise::default(), &mut rng());
        let b = measure(&p, &MeasurementNoise::default(), &mut rng());
        assert_eq!(a, b);
        let noise = MeasurementNoise::default();
        let mut g = rng();
        let samples: Vec<Output> = (0..10_000).map(|_| measure(&p, &noise, &mut g) - Output::new(0.1, 0.2, 0.3)).collect();
        for (c, s) in [(0, noise.position_std), (1, noise.position_std), (2, noise.yaw_std)] {
            let mean = samples.iter().map(|v| v[c]).sum::<f64>() / 1e4;
            let var = samples.iter().map(|v| (v[c] - mean).powi(2)).sum::<f64>() / (1e4 - 1.0);
            assert!((var.sqrt() / s - 1.0).abs() < 0.1);
        }
    }

    #[test]
    fn exact_estimator_tracks_truth() {
        let m = model();
        let x0 = State::from_column_slice(&[0.5, 0.3, 0.0, 0.1, 0.0, 0.0]);
        let mut plant = PlantState::new(x0, Input::zeros());
        let mut est = Estimator::new(&m, &ExtendedState { state: x0, disturbance: Input::zeros() }, &EstimatorSettings::default()).unwrap();
        let mut g = rng();
        for t in 0..100 {
            let u = Input::new((t as f64 * 0.1).sin(), 0.2, -0.1);
            plant_step(&m, &mut plant, &u, 0.0, &mut g).unwrap();
            let y = measure(&plant, &MeasurementNoise::none(), &mut g);
            ekf_step(&mut est, &u, &y).unwrap();
            assert!((est.estimate().state - plant.state).amax() < 1e-12);
        }
    }

    #[test]
    fn disturbance_estimate_converges() {
        let m = model();
        let d = Input::new(0.5, 0.0, 0.0);
        let mut plant = PlantState::new(State::zeros(), d);
        let mut est = Estimator::new(&m, &ExtendedState::default(), &EstimatorSettings::default()).unwrap();
        let mut g = rng();
        for _ in 0..100 {
            plant_step(&m, &mut plant, &Input::zeros(), 0.0, &mut g).unwrap();
            let y = measure(&plant, &MeasurementNoise::none(), &mut g);
            ekf_step(&mut est, &Input::zeros(), &y).unwrap();
        }
        assert!((est.estimate().disturbance - d).norm() <= 0.05 * d.norm());
        let c = est.covariance();
        assert!((c - c.transpose()).amax() == 0.0 && c.cholesky().is_some());
    }

    #[test]
    fn stationary_velocity_estimate_vanishes() {
        let m = model();
        let x0 = State::from_column_slice(&[0.4, 0.2, 0.1, 0.0, 0.0, 0.0]);
        let plant = PlantState::new(x0, Input::zeros());
        let mut est = Estimator::new(&m, &ExtendedState { state: x0, disturbance: Input::new(0.2, 0.0, 0.0) }, &EstimatorSettings::default()).unwrap();
        let mut g = rng();
        for _ in 0..200 {
            let y = measure(&plant, &MeasurementNoise::default(), &mut g);
            ekf_step(&mut est, &Input::zeros(), &y).unwrap();
        }
        let v = est.estimate().state;
        assert!(v.fixed_rows::<3>(3).amax() < 0.02);
    }

    #[test]
    fn innovations_are_zero_mean_and_white() {
        let m = model();
        let noise = MeasurementNoise::default();
        let mut plant = PlantState::new(State::zeros(), Input::zeros());
        let settings = EstimatorSettings { velocity_noise: 0.02, disturbance_noise: 1e-4, initial_disturbance_std: 1e-3, ..EstimatorSettings::default() };
        let mut est = Estimator::new(&m, &ExtendedState::default(), &settings).unwrap();
        let mut g = rng();
        let mut seq = Vec::new();
        for t in 0..4000 {
            plant_step(&m, &mut plant, &Input::zeros(), settings.velocity_noise * m.dt.sqrt(), &mut g).unwrap();
            let y = measure(&plant, &noise, &mut g);
            let innov = ekf_step(&mut est, &Input::zeros(), &y).unwrap();
            if t >= 200 {
                seq.push(innov[0]);
            }
        }
        let n = seq.len() as f64;
        let mean = seq.iter().sum::<f64>() / n;
        let var = seq.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        assert!(mean.abs() < 4.0 * (var / n).sqrt());
        let lag1 = seq.windows(2).map(|w| (w[0] - mean) * (w[1] - mean)).sum::<f64>() / (n * var);
        assert!(lag1.abs() < 4.0 / n.sqrt());
    }

    #[test]
    fn rejects_degenerate_noise() {
        let settings = EstimatorSettings { measurement: MeasurementNoise::none(), ..EstimatorSettings::default() };
        assert!(Estimator::new(&model(), &ExtendedState::default(), &settings).is_err());
    }
}
