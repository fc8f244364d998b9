//! Independent oracles and synthetic plants shared by the integration
//! suites. Everything here deliberately avoids the crate's own numerical
//! methods: the power-flow oracle iterates on the nodal admittance matrix
//! instead of sweeping the tree, the QP oracle is a projected-gradient
//! loop, and the identification plants have closed-form responses.

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;

use voltgrid::grid::{InjectionSet, NetworkModel, PerUnitNetwork};
use voltgrid::qp::QpProblem;
use voltgrid::sysid::{ChannelRegistry, PulseExperiment, SysIdError};

pub fn benchmark() -> PerUnitNetwork {
    NetworkModel::parse(voltgrid::BENCHMARK_NET)
        .unwrap()
        .to_per_unit()
        .unwrap()
}

/// Gauss-Seidel on the bus admittance matrix, built from the same branch
/// impedances and pi-half shunts but never touching the sweep solver.
/// Returns the complex bus voltages once no update moves more than `tol`.
pub fn gauss_seidel(
    net: &PerUnitNetwork,
    inj: &InjectionSet,
    v_slack: f64,
    tol: f64,
    max_iterations: usize,
) -> Result<Vec<Complex64>, String> {
    let n = net.n_buses();
    let mut diag = vec![Complex64::new(0.0, 0.0); n];
    let mut neighbors: Vec<Vec<(usize, Complex64)>> = vec![Vec::new(); n];
    for b in &net.branches {
        let y = Complex64::new(1.0, 0.0) / b.z;
        diag[b.from] += y + b.y_half;
        diag[b.to] += y + b.y_half;
        neighbors[b.from].push((b.to, -y));
        neighbors[b.to].push((b.from, -y));
    }
    let mut v = vec![Complex64::new(v_slack, 0.0); n];
    for _ in 0..max_iterations {
        let mut moved = 0.0_f64;
        for i in 0..n {
            if i == net.slack {
                continue;
            }
            let mut off = Complex64::new(0.0, 0.0);
            for &(j, y) in &neighbors[i] {
                off += y * v[j];
            }
            let next = ((inj.s[i] / v[i]).conj() - off) / diag[i];
            moved = moved.max((next - v[i]).norm());
            v[i] = next;
        }
        if moved < tol {
            return Ok(v);
        }
    }
    Err(format!(
        "Gauss-Seidel did not reach {tol:.1e} within {max_iterations} iterations"
    ))
}

/// Receiving-end voltage magnitude of a slack--line--load pair with series
/// impedance r + jx and injected power p + jq, from the quadratic in |V|^2
/// solved by bisection (the physical high-voltage root).
pub fn two_bus_receiving_voltage(v_slack: f64, r: f64, x: f64, p: f64, q: f64) -> f64 {
    let c1 = p * r + q * x;
    let c2 = p * x - q * r;
    let f = |w: f64| w * w - (2.0 * c1 + v_slack * v_slack) * w + c1 * c1 + c2 * c2;
    let (mut lo, mut hi) = (
        (2.0 * c1 + v_slack * v_slack) / 2.0,
        2.0 * c1 + v_slack * v_slack,
    );
    assert!(f(lo) < 0.0 && f(hi) > 0.0, "bisection bracket failed");
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if f(mid) > 0.0 {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    (0.5 * (lo + hi)).sqrt()
}

/// Two-bus network (slack S, load bus B) with the series impedance r + jx
/// per unit and no shunt capacitance.
pub fn two_bus_network(r: f64, x: f64) -> PerUnitNetwork {
    let l_mh = x * 8.0 / (2.0 * std::f64::consts::PI * 50.0) * 1e3;
    let text = format!(
        "[bases]\ns_mva = 50\nv_kv = 20\nf_hz = 50\n\
         [buses]\nS 0 substation\nB 1 mv\n\
         [branches]\nL S B cable {} {} 0 1\n\
         [transformers]\nT hv_mv S - 50 176 15.5 12 1.5\n\
         [loads]\n[generators]\n",
        r * 8.0,
        l_mh
    );
    NetworkModel::parse(&text).unwrap().to_per_unit().unwrap()
}

fn lab_registry() -> ChannelRegistry {
    ChannelRegistry {
        outputs: vec!["y".into()],
        y_nominal: vec![0.0],
        inputs: vec!["u".into()],
        u_op: vec![0.0],
        disturbances: vec!["w".into()],
        d_op: vec![0.0],
    }
}

/// y(k+1) = pole * y(k) + gain * u(k); pulse response gain * pole^(i-1).
pub struct FirstOrderLag {
    pub pole: f64,
    pub input_gain: f64,
    pub disturbance_gain: f64,
}

impl FirstOrderLag {
    fn response(&self, gain: f64, amplitude: f64, steps: usize) -> Vec<Vec<f64>> {
        let mut rows = Vec::with_capacity(steps);
        let mut y = gain * amplitude;
        for _ in 0..steps {
            rows.push(vec![y]);
            y *= self.pole;
        }
        rows
    }
}

impl PulseExperiment for FirstOrderLag {
    fn registry(&self) -> ChannelRegistry {
        lab_registry()
    }

    fn t_sample_s(&self) -> f64 {
        1.0
    }

    fn operating_point(&self) -> String {
        "lab".into()
    }

    fn input_pulse(
        &self,
        _channel: usize,
        amplitude: f64,
        steps: usize,
    ) -> Result<Vec<Vec<f64>>, SysIdError> {
        Ok(self.response(self.input_gain, amplitude, steps))
    }

    fn disturbance_pulse(
        &self,
        _channel: usize,
        amplitude: f64,
        steps: usize,
    ) -> Result<Vec<Vec<f64>>, SysIdError> {
        Ok(self.response(self.disturbance_gain, amplitude, steps))
    }
}

/// Pulse-response coefficient i of [`FirstOrderLag`].
pub fn first_order_coefficient(pole: f64, gain: f64, i: usize) -> f64 {
    gain * pole.powi(i as i32 - 1)
}

/// y(k+1) = 2 r cos(th) y(k) - r^2 y(k-1) + gain * u(k); complex pole pair
/// r e^(+-j th) with pulse response gain * r^(i-1) * sin(i th) / sin(th).
pub struct DampedOscillator {
    pub radius: f64,
    pub angle: f64,
    pub input_gain: f64,
    pub disturbance_gain: f64,
}

impl DampedOscillator {
    fn response(&self, gain: f64, amplitude: f64, steps: usize) -> Vec<Vec<f64>> {
        let (a1, a2) = (2.0 * self.radius * self.angle.cos(), self.radius * self.radius);
        let mut rows = Vec::with_capacity(steps);
        let (mut before, mut now) = (0.0, gain * amplitude);
        for _ in 0..steps {
            rows.push(vec![now]);
            let next = a1 * now - a2 * before;
            before = now;
            now = next;
        }
        rows
    }
}

impl PulseExperiment for DampedOscillator {
    fn registry(&self) -> ChannelRegistry {
        lab_registry()
    }

    fn t_sample_s(&self) -> f64 {
        1.0
    }

    fn operating_point(&self) -> String {
        "lab".into()
    }

    fn input_pulse(
        &self,
        _channel: usize,
        amplitude: f64,
        steps: usize,
    ) -> Result<Vec<Vec<f64>>, SysIdError> {
        Ok(self.response(self.input_gain, amplitude, steps))
    }

    fn disturbance_pulse(
        &self,
        _channel: usize,
        amplitude: f64,
        steps: usize,
    ) -> Result<Vec<Vec<f64>>, SysIdError> {
        Ok(self.response(self.disturbance_gain, amplitude, steps))
    }
}

/// Pulse-response coefficient i of [`DampedOscillator`].
pub fn oscillator_coefficient(radius: f64, angle: f64, gain: f64, i: usize) -> f64 {
    gain * radius.powi(i as i32 - 1) * (i as f64 * angle).sin() / angle.sin()
}

/// y(k) = input_gain * u(k - delay) + disturbance_gain * w(k - disturbance_delay).
pub struct TransportDelay {
    pub delay: usize,
    pub input_gain: f64,
    pub disturbance_delay: usize,
    pub disturbance_gain: f64,
}

impl TransportDelay {
    fn response(delay: usize, gain: f64, amplitude: f64, steps: usize) -> Vec<Vec<f64>> {
        (1..=steps)
            .map(|i| vec![if i == delay { gain * amplitude } else { 0.0 }])
            .collect()
    }
}

impl PulseExperiment for TransportDelay {
    fn registry(&self) -> ChannelRegistry {
        lab_registry()
    }

    fn t_sample_s(&self) -> f64 {
        1.0
    }

    fn operating_point(&self) -> String {
        "lab".into()
    }

    fn input_pulse(
        &self,
        _channel: usize,
        amplitude: f64,
        steps: usize,
    ) -> Result<Vec<Vec<f64>>, SysIdError> {
        Ok(Self::response(self.delay, self.input_gain, amplitude, steps))
    }

    fn disturbance_pulse(
        &self,
        _channel: usize,
        amplitude: f64,
        steps: usize,
    ) -> Result<Vec<Vec<f64>>, SysIdError> {
        Ok(Self::response(
            self.disturbance_delay,
            self.disturbance_gain,
            amplitude,
            steps,
        ))
    }
}

/// Projected gradient descent for box-constrained problems: a fixed step of
/// one over the Hessian's row-sum bound, clamped to the box each iteration.
/// The fixed point is the exact minimizer, so running until the iterate
/// stops moving gives an oracle independent of the active-set method.
pub fn projected_gradient(qp: &QpProblem, max_iterations: usize) -> DVector<f64> {
    assert_eq!(qp.a.nrows(), 0, "oracle handles box constraints only");
    let n = qp.n_vars();
    let mut bound = 0.0_f64;
    for i in 0..n {
        bound = bound.max(qp.h.row(i).iter().map(|v| v.abs()).sum());
    }
    let step = 1.0 / bound;
    let clamp = |z: DVector<f64>| {
        DVector::from_fn(n, |j, _| z[j].clamp(qp.lower[j], qp.upper[j]))
    };
    let mut z = clamp(DVector::zeros(n));
    for _ in 0..max_iterations {
        let next = clamp(&z - step * (&qp.h * &z + &qp.f));
        let moved = (&next - &z).amax();
        z = next;
        if moved <= 1e-15 * (1.0 + z.amax()) {
            break;
        }
    }
    z
}

/// Convenience wrapper so tests can assemble dense H from a factor product.
pub fn spd_matrix(factor: &DMatrix<f64>, shift: f64) -> DMatrix<f64> {
    let n = factor.nrows();
    factor * factor.transpose() + DMatrix::identity(n, n) * shift
}
