//! Joint actuator model.
//!
//! One actuator is a strain-wave reducer driven by an outrunner motor under
//! field-oriented control. The simulation abstracts the electrical side into
//! an affine current-versus-load model and keeps three mechanical pieces:
//!
//! * a cascaded P-position / PI-velocity loop producing output torque,
//! * a rigid output inertia integrated with semi-implicit Euler,
//! * a linear output compliance that deflects the reported position under
//!   external load.
//!
//! Setpoints reach the position loop through one of three [`InputMode`]s.
//! Units: output revolutions, rev/s, Nm, A, seconds.

use std::f64::consts::TAU;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Holding-current calibration points (load Nm, average current A).
pub const LOW_LOAD_POINT: (f64, f64) = (13.5, 2.0);
pub const HIGH_LOAD_POINT: (f64, f64) = (73.0, 8.0);

/// Compliance calibration: output deflection in rev observed at this load in Nm.
pub const COMPLIANCE_POINT: (f64, f64) = (44.1, 0.05);

/// Output speed limit, 26 rpm.
pub const OUTPUT_SPEED_LIMIT_RPM: f64 = 26.0;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ActuatorError {
    #[error("load of {torque} Nm exceeds the {peak} Nm peak torque")]
    Overload { torque: f64, peak: f64 },
    #[error("torque must be non-negative, got {0} Nm")]
    NegativeTorque(f64),
    #[error("degenerate current fit: both calibration points at {0} Nm")]
    DegenerateFit(f64),
    #[error("invalid actuator parameters: {0}")]
    InvalidParams(String),
    #[error("time step {dt} s outside (0, {max}] s")]
    InvalidStep { dt: f64, max: f64 },
    #[error("non-finite value in actuator {0}")]
    StateCorruption(&'static str),
}

/// Static and control parameters for one actuator.
///
/// Loadable from the `[actuator]` table of a config file; every key is
/// optional and falls back to [`ActuatorParams::default`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ActuatorParams {
    pub gear_ratio: f64,
    /// Nm.
    pub rated_torque: f64,
    /// Nm at the output.
    pub peak_torque: f64,
    /// Nm at the motor shaft.
    pub motor_peak_torque: f64,
    /// rev/s at the output.
    pub output_speed_limit: f64,
    /// Holding current at zero load, A.
    pub current_offset: f64,
    /// A per Nm.
    pub current_slope: f64,
    /// Output stiffness, Nm/rad.
    pub output_stiffness: f64,
    /// Control loop rate, Hz.
    pub loop_rate: f64,
    /// Default trapezoid acceleration, rev/s².
    pub accel_limit: f64,
    /// Position filter bandwidth, Hz.
    pub filter_bandwidth: f64,
    /// Reflected output inertia, kg·m².
    pub inertia: f64,
    /// (rev/s) per rev of position error.
    pub pos_gain: f64,
    /// Nm per rev/s of velocity error.
    pub vel_gain: f64,
    /// Nm per rev of integrated velocity error.
    pub vel_integrator_gain: f64,
}

impl Default for ActuatorParams {
    fn default() -> Self {
        let (current_offset, current_slope) =
            calibrate_current_model(LOW_LOAD_POINT, HIGH_LOAD_POINT)
                .expect("calibration points are distinct");
        ActuatorParams {
            gear_ratio: 160.0,
            rated_torque: 47.0,
            peak_torque: 123.0,
            motor_peak_torque: 5.8,
            output_speed_limit: OUTPUT_SPEED_LIMIT_RPM / 60.0,
            current_offset,
            current_slope,
            output_stiffness: stiffness_from_deflection(COMPLIANCE_POINT.0, COMPLIANCE_POINT.1),
            loop_rate: 1000.0,
            accel_limit: 1.0,
            filter_bandwidth: 2.0,
            inertia: 0.5,
            pos_gain: 80.0,
            vel_gain: 1600.0,
            vel_integrator_gain: 2000.0,
        }
    }
}

/// Fits `current = c0 + c1 * torque` through two (Nm, A) points.
pub fn calibrate_current_model(
    point_a: (f64, f64),
    point_b: (f64, f64),
) -> Result<(f64, f64), ActuatorError> {
    let (ta, ia) = point_a;
    let (tb, ib) = point_b;
    if ta == tb {
        return Err(ActuatorError::DegenerateFit(ta));
    }
    let slope = (ib - ia) / (tb - ta);
    Ok((ia - slope * ta, slope))
}

/// Stiffness in Nm/rad that deflects `deflection_rev` under `torque`.
pub fn stiffness_from_deflection(torque: f64, deflection_rev: f64) -> f64 {
    torque / (deflection_rev * TAU)
}

impl ActuatorParams {
    pub fn validate(&self) -> Result<(), ActuatorError> {
        let bad = |msg: &str| Err(ActuatorError::InvalidParams(msg.to_owned()));
        let all = [
            self.gear_ratio,
            self.rated_torque,
            self.peak_torque,
            self.motor_peak_torque,
            self.output_speed_limit,
            self.current_offset,
            self.current_slope,
            self.output_stiffness,
            self.loop_rate,
            self.accel_limit,
            self.filter_bandwidth,
            self.inertia,
            self.pos_gain,
            self.vel_gain,
            self.vel_integrator_gain,
        ];
        if all.iter().any(|v| !v.is_finite()) {
            return bad("all parameters must be finite");
        }
        if self.gear_ratio <= 0.0 {
            return bad("gear_ratio must be positive");
        }
        if self.rated_torque <= 0.0 || self.peak_torque < self.rated_torque {
            return bad("need peak_torque >= rated_torque > 0");
        }
        if self.motor_peak_torque * self.gear_ratio < self.peak_torque {
            return bad("motor_peak_torque * gear_ratio must cover peak_torque");
        }
        if self.current_slope <= 0.0 || self.output_stiffness <= 0.0 {
            return bad("current_slope and output_stiffness must be positive");
        }
        if self.output_speed_limit <= 0.0 || self.loop_rate <= 0.0 || self.accel_limit <= 0.0 {
            return bad("output_speed_limit, loop_rate and accel_limit must be positive");
        }
        if self.filter_bandwidth <= 0.0 || self.inertia <= 0.0 {
            return bad("filter_bandwidth and inertia must be positive");
        }
        if self.pos_gain < 0.0 || self.vel_gain < 0.0 || self.vel_integrator_gain < 0.0 {
            return bad("controller gains must be non-negative");
        }
        Ok(())
    }

    /// Average holding current for a static load, A.
    pub fn current_for_load(&self, torque: f64) -> Result<f64, ActuatorError> {
        self.check_load(torque)?;
        Ok(self.current_offset + self.current_slope * torque)
    }

    /// Output deflection under a static load, rev.
    pub fn static_deflection(&self, torque: f64) -> Result<f64, ActuatorError> {
        self.check_load(torque)?;
        Ok(torque / (self.output_stiffness * TAU))
    }

    /// Current corresponding to peak output torque; the drive never exceeds it.
    pub fn peak_current(&self) -> f64 {
        self.current_offset + self.current_slope * self.peak_torque
    }

    /// Largest admissible controller step, s.
    pub fn max_step(&self) -> f64 {
        1.0 / self.loop_rate
    }

    /// Signed holding bias for a signed load. Zero load draws no holding current.
    pub fn holding_current(&self, load: f64) -> Result<f64, ActuatorError> {
        if load == 0.0 {
            return Ok(0.0);
        }
        Ok(load.signum() * self.current_for_load(load.abs())?)
    }

    fn check_load(&self, torque: f64) -> Result<(), ActuatorError> {
        if torque.is_nan() || torque < 0.0 {
            return Err(ActuatorError::NegativeTorque(torque));
        }
        if torque > self.peak_torque {
            return Err(ActuatorError::Overload {
                torque,
                peak: self.peak_torque,
            });
        }
        Ok(())
    }
}

/// Setpoint shaping policy in front of the position loop.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InputMode {
    /// The raw target goes straight to the position loop.
    Passthrough,
    /// Critically damped second-order filter at `filter_bandwidth`.
    PositionFilter,
    /// Velocity- and acceleration-limited trapezoid.
    TrapezoidalTrajectory,
}

impl InputMode {
    pub const ALL: [InputMode; 3] = [
        InputMode::Passthrough,
        InputMode::PositionFilter,
        InputMode::TrapezoidalTrajectory,
    ];
}

/// A symmetric trapezoidal (or triangular) position profile.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrapezoidalProfile {
    pub start: f64,
    pub goal: f64,
    /// Peak speed actually reached, rev/s (always positive).
    pub v_cruise: f64,
    pub a_up: f64,
    pub a_down: f64,
    pub t_accel: f64,
    pub t_cruise: f64,
    pub t_decel: f64,
}

impl TrapezoidalProfile {
    /// Plans a rest-to-rest move. Short moves that cannot reach `v_max`
    /// become triangles peaking at `sqrt(a_max * |goal - start|)`.
    pub fn new(start: f64, goal: f64, v_max: f64, a_max: f64) -> Result<Self, ActuatorError> {
        if !(v_max > 0.0 && a_max > 0.0) || !v_max.is_finite() || !a_max.is_finite() {
            return Err(ActuatorError::InvalidParams(format!(
                "trapezoid needs positive finite limits, got v_max={v_max} a_max={a_max}"
            )));
        }
        if !start.is_finite() || !goal.is_finite() {
            return Err(ActuatorError::StateCorruption("trapezoid endpoints"));
        }
        let distance = (goal - start).abs();
        if distance == 0.0 {
            return Ok(TrapezoidalProfile {
                start,
                goal,
                v_cruise: 0.0,
                a_up: a_max,
                a_down: a_max,
                t_accel: 0.0,
                t_cruise: 0.0,
                t_decel: 0.0,
            });
        }
        let (v_cruise, t_cruise) = if distance >= v_max * v_max / a_max {
            (v_max, distance / v_max - v_max / a_max)
        } else {
            ((a_max * distance).sqrt(), 0.0)
        };
        let t_ramp = v_cruise / a_max;
        Ok(TrapezoidalProfile {
            start,
            goal,
            v_cruise,
            a_up: a_max,
            a_down: a_max,
            t_accel: t_ramp,
            t_cruise,
            t_decel: t_ramp,
        })
    }

    pub fn duration(&self) -> f64 {
        self.t_accel + self.t_cruise + self.t_decel
    }

    pub fn is_triangle(&self) -> bool {
        self.t_cruise == 0.0
    }

    /// Position and velocity at time `t` after the profile start.
    pub fn sample(&self, t: f64) -> (f64, f64) {
        let dir = (self.goal - self.start).signum();
        let end = self.duration();
        if t <= 0.0 {
            (self.start, 0.0)
        } else if t >= end {
            (self.goal, 0.0)
        } else if t < self.t_accel {
            (
                self.start + dir * 0.5 * self.a_up * t * t,
                dir * self.a_up * t,
            )
        } else if t < self.t_accel + self.t_cruise {
            let ramp = 0.5 * self.a_up * self.t_accel * self.t_accel;
            (
                self.start + dir * (ramp + self.v_cruise * (t - self.t_accel)),
                dir * self.v_cruise,
            )
        } else {
            let remaining = end - t;
            (
                self.goal - dir * 0.5 * self.a_down * remaining * remaining,
                dir * self.a_down * remaining,
            )
        }
    }

    /// The same move slowed down to last `duration` seconds. Returns `self`
    /// unchanged when it is already at least that long.
    pub fn stretched_to(&self, duration: f64) -> TrapezoidalProfile {
        let own = self.duration();
        if own == 0.0 || duration <= own {
            return *self;
        }
        let f = own / duration;
        TrapezoidalProfile {
            v_cruise: self.v_cruise * f,
            a_up: self.a_up * f * f,
            a_down: self.a_down * f * f,
            t_accel: self.t_accel / f,
            t_cruise: self.t_cruise / f,
            t_decel: self.t_decel / f,
            ..*self
        }
    }
}

/// Dynamic state of one actuator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActuatorState {
    /// Output position including compliance, rev.
    pub position: f64,
    /// Output velocity, rev/s.
    pub velocity: f64,
    /// Phase current magnitude with sign of torque, A.
    pub current: f64,
    /// Shaped setpoint fed to the position loop, rev.
    pub setpoint: f64,
    /// Final commanded position, rev.
    pub target: f64,
    pub input_mode: InputMode,
    pub active_profile: Option<TrapezoidalProfile>,
    pub elapsed_in_profile: f64,
    /// Current output deflection from the last applied load, rev.
    pub deflection: f64,
    filter_velocity: f64,
    integrator: f64,
}

impl ActuatorState {
    /// An actuator at rest holding `position`.
    pub fn at_rest(position: f64, input_mode: InputMode) -> Self {
        ActuatorState {
            position,
            velocity: 0.0,
            current: 0.0,
            setpoint: position,
            target: position,
            input_mode,
            active_profile: None,
            elapsed_in_profile: 0.0,
            deflection: 0.0,
            filter_velocity: 0.0,
            integrator: 0.0,
        }
    }

    /// Position of the reducer side, before compliance.
    pub fn gear_position(&self) -> f64 {
        self.position - self.deflection
    }

    /// Installs a new target. In trapezoidal mode a profile is planned from
    /// the current setpoint using the parameter limits.
    pub fn command(
        &mut self,
        target: f64,
        mode: InputMode,
        params: &ActuatorParams,
    ) -> Result<(), ActuatorError> {
        if !target.is_finite() {
            return Err(ActuatorError::StateCorruption("target"));
        }
        let profile = match mode {
            InputMode::TrapezoidalTrajectory => Some(TrapezoidalProfile::new(
                self.setpoint,
                target,
                params.output_speed_limit,
                params.accel_limit,
            )?),
            _ => None,
        };
        self.switch_mode(mode);
        self.target = target;
        self.active_profile = profile;
        self.elapsed_in_profile = 0.0;
        Ok(())
    }

    /// Installs a precomputed profile, e.g. one stretched for multi-joint sync.
    pub fn command_profile(&mut self, profile: TrapezoidalProfile) {
        self.switch_mode(InputMode::TrapezoidalTrajectory);
        self.target = profile.goal;
        self.active_profile = Some(profile);
        self.elapsed_in_profile = 0.0;
    }

    fn switch_mode(&mut self, mode: InputMode) {
        if mode != self.input_mode {
            self.filter_velocity = if mode == InputMode::PositionFilter {
                self.velocity
            } else {
                0.0
            };
            self.input_mode = mode;
        }
    }

    /// True once the setpoint generator is finished and the output is within
    /// `tolerance` rev of the target and moving slower than `tolerance` rev/s.
    pub fn is_settled(&self, tolerance: f64) -> bool {
        let profile_done = self
            .active_profile
            .map_or(true, |p| self.elapsed_in_profile >= p.duration());
        profile_done
            && (self.gear_position() - self.target).abs() <= tolerance
            && self.velocity.abs() <= tolerance
    }

    fn check_finite(&self) -> Result<(), ActuatorError> {
        let fields = [
            (self.position, "position"),
            (self.velocity, "velocity"),
            (self.current, "current"),
            (self.setpoint, "setpoint"),
            (self.target, "target"),
            (self.elapsed_in_profile, "profile clock"),
            (self.deflection, "deflection"),
            (self.filter_velocity, "filter"),
            (self.integrator, "integrator"),
        ];
        match fields.iter().find(|(v, _)| !v.is_finite()) {
            Some((_, name)) => Err(ActuatorError::StateCorruption(name)),
            None => Ok(()),
        }
    }
}

/// Advances one actuator by `dt` seconds while it holds `external_load` Nm.
///
/// The load enters twice: the drive adds the matching holding current as a
/// bias (so the loops only see the dynamic torque), and the output deflects
/// by the compliance model.
pub fn step_actuator(
    state: &ActuatorState,
    params: &ActuatorParams,
    dt: f64,
    external_load: f64,
) -> Result<ActuatorState, ActuatorError> {
    state.check_finite()?;
    if !external_load.is_finite() {
        return Err(ActuatorError::StateCorruption("external load"));
    }
    let max = params.max_step();
    if !(dt > 0.0) || dt > max * (1.0 + 1e-9) {
        return Err(ActuatorError::InvalidStep { dt, max });
    }
    let bias = params.holding_current(external_load)?;
    let deflection = external_load / (params.output_stiffness * TAU);

    let mut next = state.clone();

    let feedforward = match state.input_mode {
        InputMode::Passthrough => {
            next.setpoint = state.target;
            0.0
        }
        InputMode::PositionFilter => {
            let w = TAU * params.filter_bandwidth;
            let accel =
                w * w * (state.target - state.setpoint) - 2.0 * w * state.filter_velocity;
            next.filter_velocity = state.filter_velocity + accel * dt;
            next.setpoint = state.setpoint + next.filter_velocity * dt;
            next.filter_velocity
        }
        InputMode::TrapezoidalTrajectory => match &state.active_profile {
            Some(profile) => {
                let end = profile.duration();
                next.elapsed_in_profile = (state.elapsed_in_profile + dt).min(end);
                let (pos, vel) = profile.sample(next.elapsed_in_profile);
                next.setpoint = pos;
                vel
            }
            None => {
                next.setpoint = state.target;
                0.0
            }
        },
    };

    let limit = params.output_speed_limit;
    let gear = state.gear_position();
    let vel_cmd = (feedforward + params.pos_gain * (next.setpoint - gear)).clamp(-limit, limit);
    let vel_err = vel_cmd - state.velocity;

    // Dynamic torque budget left after holding the external load.
    let lo = -params.peak_torque - external_load;
    let hi = params.peak_torque - external_load;
    let integrator = state.integrator + params.vel_integrator_gain * vel_err * dt;
    let unclamped = params.vel_gain * vel_err + integrator;
    let torque = unclamped.clamp(lo, hi);
    next.integrator = if torque == unclamped {
        integrator
    } else {
        state.integrator
    };

    let accel = torque / (params.inertia * TAU);
    next.velocity = (state.velocity + accel * dt).clamp(-limit, limit);
    let gear_next = gear + next.velocity * dt;
    next.deflection = deflection;
    next.position = gear_next + deflection;

    let peak_current = params.peak_current();
    next.current = (bias + params.current_slope * torque).clamp(-peak_current, peak_current);

    next.check_finite()?;
    Ok(next)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn params() -> ActuatorParams {
        ActuatorParams::default()
    }

    #[test]
    fn defaults_are_valid_and_match_table_values() {
        let p = params();
        p.validate().unwrap();
        assert_eq!(p.gear_ratio, 160.0);
        assert_eq!(p.rated_torque, 47.0);
        assert_eq!(p.peak_torque, 123.0);
        assert!((p.output_speed_limit - 0.433_333_333).abs() < 1e-9);
        assert!(p.motor_peak_torque * p.gear_ratio >= p.peak_torque);
    }

    #[test]
    fn current_model_hits_calibration_points() {
        let p = params();
        assert!((p.current_for_load(13.5).unwrap() - 2.0).abs() < 1e-9);
        assert!((p.current_for_load(73.0).unwrap() - 8.0).abs() < 1e-9);
        // Two-point fit: slope 6/59.5 A/Nm, offset 2 - 13.5 * slope.
        let expected = 2.0 + (33.5 - 13.5) * 6.0 / 59.5;
        assert!((p.current_for_load(33.5).unwrap() - expected).abs() < 1e-12);
        assert!((expected - 4.017).abs() < 1e-3);
    }

    #[test]
    fn current_model_rejects_out_of_range_loads() {
        let p = params();
        assert!(matches!(
            p.current_for_load(123.5),
            Err(ActuatorError::Overload { .. })
        ));
        assert!(matches!(
            p.current_for_load(-1.0),
            Err(ActuatorError::NegativeTorque(_))
        ));
        assert!(p.current_for_load(123.0).is_ok());
    }

    #[test]
    fn calibration_fits() {
        let (c0, c1) = calibrate_current_model((13.5, 2.0), (73.0, 8.0)).unwrap();
        assert!((c0 - 0.638_655_462).abs() < 1e-8);
        assert!((c1 - 0.100_840_336).abs() < 1e-8);
        assert_eq!(calibrate_current_model((0.0, 0.0), (1.0, 1.0)).unwrap(), (0.0, 1.0));
        assert_eq!(
            calibrate_current_model((10.0, 2.0), (10.0, 3.0)),
            Err(ActuatorError::DegenerateFit(10.0))
        );
    }

    #[test]
    fn deflection_is_linear_and_calibrated() {
        let p = params();
        assert_eq!(p.static_deflection(0.0).unwrap(), 0.0);
        assert!((p.static_deflection(44.1).unwrap() - 0.05).abs() < 1e-12);
        assert!((p.static_deflection(22.05).unwrap() - 0.025).abs() < 1e-12);
        assert!((p.output_stiffness - 140.374).abs() < 1e-3);
        assert!(p.static_deflection(200.0).is_err());
    }

    #[test]
    fn trapezoid_shapes() {
        let zero = TrapezoidalProfile::new(0.3, 0.3, 0.4333, 1.0).unwrap();
        assert_eq!(zero.duration(), 0.0);
        assert_eq!(zero.sample(0.0), (0.3, 0.0));
        assert_eq!(zero.sample(5.0), (0.3, 0.0));

        let v = 26.0 / 60.0;
        let trap = TrapezoidalProfile::new(0.0, 1.0, v, 1.0).unwrap();
        assert!(!trap.is_triangle());
        assert!((trap.duration() - (1.0 / v + v)).abs() < 1e-12);
        assert!((trap.duration() - 2.741).abs() < 1e-3);
        let (p, vel) = trap.sample(trap.t_accel);
        assert!((p - 0.5 * trap.t_accel * trap.t_accel).abs() < 1e-12);
        assert!((vel - v).abs() < 1e-12);
        assert_eq!(trap.sample(0.0), (0.0, 0.0));
        assert_eq!(trap.sample(1e9), (1.0, 0.0));

        let tri = TrapezoidalProfile::new(0.0, 0.1, v, 1.0).unwrap();
        assert!(tri.is_triangle());
        assert!((tri.v_cruise - 0.1f64.sqrt()).abs() < 1e-12);
        assert!((tri.duration() - 2.0 * 0.1f64.sqrt()).abs() < 1e-12);
        assert!((tri.duration() - 0.6325).abs() < 1e-4);
    }

    #[test]
    fn trapezoid_rejects_bad_limits() {
        assert!(TrapezoidalProfile::new(0.0, 1.0, 0.0, 1.0).is_err());
        assert!(TrapezoidalProfile::new(0.0, 1.0, 1.0, -1.0).is_err());
    }

    #[test]
    fn negative_moves_mirror() {
        let fwd = TrapezoidalProfile::new(0.0, 0.7, 0.4, 1.0).unwrap();
        let back = TrapezoidalProfile::new(0.7, 0.0, 0.4, 1.0).unwrap();
        for i in 0..=40 {
            let t = fwd.duration() * i as f64 / 40.0;
            let (pf, vf) = fwd.sample(t);
            let (pb, vb) = back.sample(t);
            assert!((pf - (0.7 - pb)).abs() < 1e-12);
            assert!((vf + vb).abs() < 1e-12);
        }
    }

    #[test]
    fn stretched_profile_keeps_endpoints() {
        let p = TrapezoidalProfile::new(0.0, 0.2, 0.4, 1.0).unwrap();
        let s = p.stretched_to(3.0);
        assert!((s.duration() - 3.0).abs() < 1e-12);
        assert_eq!(s.sample(3.0), (0.2, 0.0));
        assert!(s.v_cruise <= p.v_cruise);
        assert_eq!(p.stretched_to(0.1), p);
    }

    #[test]
    fn rest_is_a_fixed_point() {
        let p = params();
        for mode in InputMode::ALL {
            let s = ActuatorState::at_rest(0.25, mode);
            let next = step_actuator(&s, &p, 1e-3, 0.0).unwrap();
            assert_eq!(next, s, "{mode:?}");
        }
    }

    #[test]
    fn step_rejects_bad_inputs() {
        let p = params();
        let s = ActuatorState::at_rest(0.0, InputMode::Passthrough);
        assert!(matches!(
            step_actuator(&s, &p, 0.0, 0.0),
            Err(ActuatorError::InvalidStep { .. })
        ));
        assert!(matches!(
            step_actuator(&s, &p, 2e-3, 0.0),
            Err(ActuatorError::InvalidStep { .. })
        ));
        assert!(matches!(
            step_actuator(&s, &p, 1e-3, f64::NAN),
            Err(ActuatorError::StateCorruption(_))
        ));
        let mut broken = s.clone();
        broken.velocity = f64::INFINITY;
        assert!(matches!(
            step_actuator(&broken, &p, 1e-3, 0.0),
            Err(ActuatorError::StateCorruption("velocity"))
        ));
        assert!(matches!(
            step_actuator(&s, &p, 1e-3, -130.0),
            Err(ActuatorError::Overload { .. })
        ));
    }

    #[test]
    fn holding_bias_is_signed() {
        let p = params();
        assert_eq!(p.holding_current(0.0).unwrap(), 0.0);
        assert!((p.holding_current(-73.0).unwrap() + 8.0).abs() < 1e-9);
    }
}
