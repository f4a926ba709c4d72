//! Perturbation generation.
//!
//! Input-space attacks live in an L∞ ball (a per-coordinate budget, the way a
//! pixel budget works); prototype-space attacks live in an L2 ball (a budget
//! on the total change of all attributes). The iterated attacks take
//! sign-gradient steps and project back onto the ball after every step.
//!
//! All attacks are pure functions of (parameters, reference point, spec,
//! seed): they never mutate the model, the reference input, or the reference
//! prototypes, and they return the best-loss iterate visited, so a larger
//! budget warm-started from a smaller one can never lose ground.

use crate::diffcore::{Graph, Tensor};
use crate::error::{Error, Result};
use crate::relnet::{PrototypeSet, RelationNet};
use rand::prelude::*;

/// Attack algorithm family.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AttackFamily {
    /// Single sign-gradient step.
    Fgsm,
    /// Iterated sign-gradient steps with projection.
    Ifgsm,
    /// Black-box variant: coordinate-wise central-difference gradient
    /// estimates instead of autodiff.
    ZooLike,
}

impl AttackFamily {
    pub fn label(&self) -> &'static str {
        match self {
            AttackFamily::Fgsm => "FGSM",
            AttackFamily::Ifgsm => "IFGSM",
            AttackFamily::ZooLike => "ZOO",
        }
    }
}

/// Ball norm of the perturbation constraint.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Norm {
    Linf,
    L2,
}

/// What the attacker perturbs.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AttackTarget {
    Input,
    Prototype,
}

/// Step size choice; `Auto` derives the step from the budget and step count.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum StepSize {
    Auto,
    Fixed(f64),
}

/// Full description of one attack.
#[derive(Debug, Clone, PartialEq)]
pub struct AttackSpec {
    pub family: AttackFamily,
    pub norm: Norm,
    /// Budget ρ: per-coordinate bound for L∞, total Euclidean bound for L2.
    pub magnitude: f64,
    /// Iteration count N.
    pub steps: usize,
    pub step_size: StepSize,
    pub target: AttackTarget,
    /// Optional per-coordinate domain bounds applied after projection.
    pub clamp_bounds: Option<(f64, f64)>,
}

impl AttackSpec {
    /// White-box input attack with auto step and no domain clamp.
    pub fn input_linf(family: AttackFamily, magnitude: f64, steps: usize) -> AttackSpec {
        AttackSpec {
            family,
            norm: Norm::Linf,
            magnitude,
            steps,
            step_size: StepSize::Auto,
            target: AttackTarget::Input,
            clamp_bounds: None,
        }
    }

    /// Prototype attack with auto step and no domain clamp.
    pub fn prototype_l2(family: AttackFamily, magnitude: f64, steps: usize) -> AttackSpec {
        AttackSpec {
            family,
            norm: Norm::L2,
            magnitude,
            steps,
            step_size: StepSize::Auto,
            target: AttackTarget::Prototype,
            clamp_bounds: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.magnitude >= 0.0) || !self.magnitude.is_finite() {
            return Err(Error::invalid(format!(
                "attack magnitude must be a finite non-negative real, got {}",
                self.magnitude
            )));
        }
        if self.steps < 1 {
            return Err(Error::invalid("attack step count must be ≥ 1"));
        }
        if self.family == AttackFamily::Fgsm && self.steps != 1 {
            return Err(Error::invalid("FGSM is single-step; use IFGSM for N > 1"));
        }
        match self.target {
            AttackTarget::Input if self.norm != Norm::Linf => {
                return Err(Error::invalid("input-space attacks use the L∞ norm"))
            }
            AttackTarget::Prototype if self.norm != Norm::L2 => {
                return Err(Error::invalid("prototype-space attacks use the L2 norm"))
            }
            _ => {}
        }
        if let StepSize::Fixed(e) = self.step_size {
            if !(e > 0.0) || !e.is_finite() {
                return Err(Error::invalid(format!(
                    "fixed step size must be positive, got {e}"
                )));
            }
        }
        if let Some((lo, hi)) = self.clamp_bounds {
            if !(lo <= hi) {
                return Err(Error::invalid(format!(
                    "clamp bounds must satisfy lo ≤ hi, got ({lo}, {hi})"
                )));
            }
        }
        Ok(())
    }

    /// Scenario label (`FGSM,rho=1` style) used in reports.
    pub fn label(&self) -> String {
        format!("{},rho={}", self.family.label(), self.magnitude)
    }
}

/// Truncated normal distribution: a normal (μ, σ) conditioned on [lo, hi].
///
/// `lo == hi` is the degenerate point mass at `lo` and consumes no
/// randomness; it expresses a zero-budget attack exactly.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TruncNormalSpec {
    pub lo: f64,
    pub hi: f64,
    pub mean: f64,
    pub std_dev: f64,
}

impl TruncNormalSpec {
    pub fn new(lo: f64, hi: f64, mean: f64, std_dev: f64) -> Result<Self> {
        if !(lo <= hi) {
            return Err(Error::invalid(format!(
                "truncation interval requires lo ≤ hi, got [{lo}, {hi}]"
            )));
        }
        if !(std_dev > 0.0) || !std_dev.is_finite() {
            return Err(Error::invalid(format!(
                "underlying std dev must be positive, got {std_dev}"
            )));
        }
        Ok(TruncNormalSpec {
            lo,
            hi,
            mean,
            std_dev,
        })
    }
}

/// Rejection-sample from a truncated normal. Deterministic per rng state;
/// gives up with an error after 10^6 rejected draws.
pub fn sample_truncated_normal(spec: &TruncNormalSpec, rng: &mut impl Rng) -> Result<f64> {
    if spec.lo == spec.hi {
        return Ok(spec.lo);
    }
    let normal = rand_distr::Normal::new(spec.mean, spec.std_dev)
        .map_err(|e| Error::invalid(format!("bad normal parameters: {e}")))?;
    for _ in 0..1_000_000 {
        let v: f64 = normal.sample(rng);
        if v >= spec.lo && v <= spec.hi {
            return Ok(v);
        }
    }
    Err(Error::invalid(format!(
        "truncated normal rejection sampling exhausted 10^6 draws for [{}, {}] around N({}, {}²)",
        spec.lo, spec.hi, spec.mean, spec.std_dev
    )))
}

/// Auto step size for L∞ attacks: ε = 1.25·ρ/N.
pub fn auto_step_linf(rho: f64, steps: usize) -> f64 {
    1.25 * rho / steps as f64
}

/// Auto step size for L2 prototype attacks: ε = √(ρ²/q) for dimension q.
pub fn auto_step_l2(rho: f64, dim: usize) -> f64 {
    (rho * rho / dim as f64).sqrt()
}

fn step_size(spec: &AttackSpec, dim: usize) -> f64 {
    match spec.step_size {
        StepSize::Fixed(e) => e,
        StepSize::Auto => match spec.norm {
            Norm::Linf => auto_step_linf(spec.magnitude, spec.steps),
            Norm::L2 => auto_step_l2(spec.magnitude, dim),
        },
    }
}

/// Sign with the zero convention sign(0) = 0, so coordinates without gradient
/// information stay put.
fn sgn(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

fn clamp_in(v: f64, bounds: Option<(f64, f64)>) -> f64 {
    match bounds {
        Some((lo, hi)) => v.clamp(lo, hi),
        None => v,
    }
}

/// Project onto the L∞ ball of radius ρ around `x_ref`, coordinate by
/// coordinate, then onto the domain bounds when given. Idempotent; points
/// already inside come back unchanged.
pub fn project_linf(
    x_adv: &Tensor,
    x_ref: &Tensor,
    rho: f64,
    clamp_bounds: Option<(f64, f64)>,
) -> Result<Tensor> {
    x_adv.same_shape(x_ref, "project_linf")?;
    let data = x_adv
        .data()
        .iter()
        .zip(x_ref.data())
        .map(|(&v, &r)| clamp_in(v.clamp(r - rho, r + rho), clamp_bounds))
        .collect();
    Tensor::checked(x_adv.shape().to_vec(), data, "project_linf")
}

/// Project onto the L2 ball of radius ρ around `p_ref`: points inside come
/// back unchanged, points outside are pulled radially onto the sphere. Domain
/// bounds, when given, are applied afterwards.
pub fn project_l2(
    p_adv: &Tensor,
    p_ref: &Tensor,
    rho: f64,
    clamp_bounds: Option<(f64, f64)>,
) -> Result<Tensor> {
    p_adv.same_shape(p_ref, "project_l2")?;
    let dist = p_adv
        .data()
        .iter()
        .zip(p_ref.data())
        .map(|(&v, &r)| (v - r) * (v - r))
        .sum::<f64>()
        .sqrt();
    let data: Vec<f64> = if dist <= rho {
        p_adv.data().to_vec()
    } else {
        p_adv
            .data()
            .iter()
            .zip(p_ref.data())
            .map(|(&v, &r)| r + rho * (v - r) / dist)
            .collect()
    };
    let data = data
        .into_iter()
        .map(|v| clamp_in(v, clamp_bounds))
        .collect();
    Tensor::checked(p_adv.shape().to_vec(), data, "project_l2")
}

/// Loss and per-sample input gradient of the mean batch cross-entropy.
fn batch_loss_and_input_grad(
    net: &RelationNet,
    xs: &Tensor,
    labels: &[usize],
    protos: &PrototypeSet,
    gamma: f64,
) -> Result<(Vec<f64>, Tensor)> {
    let mut graph = Graph::new();
    let params = net.bind(&mut graph);
    let x_node = graph.leaf(xs.clone());
    let p_node = graph.leaf(protos.matrix().clone());
    let per_sample = net.ce_per_sample_node(&mut graph, &params, x_node, p_node, labels, gamma)?;
    let losses = graph.value(per_sample).data().to_vec();
    let mean = graph.mean(per_sample)?;
    let grads = graph.backward(mean)?;
    Ok((losses, grads.get(x_node).clone()))
}

fn batch_losses(
    net: &RelationNet,
    xs: &Tensor,
    labels: &[usize],
    protos: &PrototypeSet,
    gamma: f64,
) -> Result<Vec<f64>> {
    let mut graph = Graph::new();
    let params = net.bind(&mut graph);
    let x_node = graph.leaf(xs.clone());
    let p_node = graph.leaf(protos.matrix().clone());
    let per_sample = net.ce_per_sample_node(&mut graph, &params, x_node, p_node, labels, gamma)?;
    Ok(graph.value(per_sample).data().to_vec())
}

/// Iterated sign-gradient ascent in input space over a whole batch.
/// Rows are independent: each sample keeps its own best-loss iterate, so the
/// result for a row is identical to attacking that row alone.
pub(crate) fn ifgsm_batch(
    net: &RelationNet,
    xs: &Tensor,
    labels: &[usize],
    protos: &PrototypeSet,
    spec: &AttackSpec,
    gamma: f64,
    warm_start: Option<&Tensor>,
) -> Result<Tensor> {
    spec.validate()?;
    if spec.target != AttackTarget::Input {
        return Err(Error::invalid("ifgsm_batch requires an input-space spec"));
    }
    let (b, d) = (xs.shape()[0], xs.shape()[1]);
    if labels.len() != b {
        return Err(Error::invalid(format!(
            "{} labels for a batch of {b}",
            labels.len()
        )));
    }
    let eps = step_size(spec, d);
    let mut current = match warm_start {
        Some(w) => {
            w.same_shape(xs, "ifgsm warm start")?;
            project_linf(w, xs, spec.magnitude, spec.clamp_bounds)?
        }
        None => xs.clone(),
    };
    let mut best = current.clone();
    let mut best_loss = vec![f64::NEG_INFINITY; b];

    for _ in 0..spec.steps {
        let (losses, grad) = batch_loss_and_input_grad(net, &current, labels, protos, gamma)?;
        for i in 0..b {
            if losses[i] > best_loss[i] {
                best_loss[i] = losses[i];
                best.data_mut()[i * d..(i + 1) * d].copy_from_slice(current.row(i));
            }
        }
        let stepped: Vec<f64> = current
            .data()
            .iter()
            .zip(grad.data())
            .map(|(&x, &g)| x + eps * sgn(g))
            .collect();
        let stepped = Tensor::checked(vec![b, d], stepped, "ifgsm step")?;
        current = project_linf(&stepped, xs, spec.magnitude, spec.clamp_bounds)?;
    }
    let final_losses = batch_losses(net, &current, labels, protos, gamma)?;
    for i in 0..b {
        if final_losses[i] > best_loss[i] {
            best.data_mut()[i * d..(i + 1) * d].copy_from_slice(current.row(i));
        }
    }
    Ok(best)
}

fn as_row_matrix(x: &Tensor) -> Result<Tensor> {
    if x.rank() != 1 {
        return Err(Error::invalid(format!(
            "expected a rank-1 input, got shape {:?}",
            x.shape()
        )));
    }
    Tensor::matrix(1, x.len(), x.data().to_vec())
}

/// White-box sign-gradient attack on one input (FGSM when `spec.steps == 1`).
///
/// Runs projected sign-gradient ascent on the cross-entropy of the true label
/// and returns the feasible point with the highest loss among the start and
/// every iterate. The model, input, and prototypes are left untouched.
pub fn ifgsm_input_attack(
    net: &RelationNet,
    x: &Tensor,
    label_index: usize,
    protos: &PrototypeSet,
    spec: &AttackSpec,
) -> Result<Tensor> {
    check_label(label_index, protos)?;
    let xs = as_row_matrix(x)?;
    let out = ifgsm_batch(
        net,
        &xs,
        &[label_index],
        protos,
        spec,
        net.config.temperature,
        None,
    )?;
    Tensor::from_vec(out.data().to_vec())
}

/// [`ifgsm_input_attack`] with an explicit starting point inside (or
/// projected into) the ball around `x`. Warm-starting a larger budget from a
/// smaller budget's result makes the achieved loss monotone in ρ.
pub fn ifgsm_input_attack_warm(
    net: &RelationNet,
    x: &Tensor,
    start: &Tensor,
    label_index: usize,
    protos: &PrototypeSet,
    spec: &AttackSpec,
) -> Result<Tensor> {
    check_label(label_index, protos)?;
    let xs = as_row_matrix(x)?;
    let ws = as_row_matrix(start)?;
    let out = ifgsm_batch(
        net,
        &xs,
        &[label_index],
        protos,
        spec,
        net.config.temperature,
        Some(&ws),
    )?;
    Tensor::from_vec(out.data().to_vec())
}

fn check_label(label_index: usize, protos: &PrototypeSet) -> Result<()> {
    if label_index >= protos.len() {
        return Err(Error::invalid(format!(
            "label index {label_index} out of range for {} prototypes",
            protos.len()
        )));
    }
    Ok(())
}

/// Which prototypes one iteration of the prototype attack updates.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PrototypeMode {
    /// Update every (active) prototype each iteration.
    Joint,
    /// Update one uniformly sampled prototype per iteration.
    SampledPerIteration,
}

/// Core prototype-space attack over a labeled batch.
///
/// `active` masks which rows may move (all when `None`); inactive rows stay
/// bitwise equal to the reference. Best-loss tracking is on the batch loss,
/// with the unperturbed set as the first candidate.
pub(crate) fn prototype_attack_core(
    net: &RelationNet,
    xs: &Tensor,
    labels: &[usize],
    protos: &PrototypeSet,
    spec: &AttackSpec,
    gamma: f64,
    mode: PrototypeMode,
    active: Option<&[bool]>,
    rng: Option<&mut dyn RngCore>,
) -> Result<PrototypeSet> {
    spec.validate()?;
    if spec.target != AttackTarget::Prototype {
        return Err(Error::invalid(
            "prototype attack requires a prototype-space spec",
        ));
    }
    let (n, q) = (protos.len(), protos.dim());
    if let Some(mask) = active {
        if mask.len() != n {
            return Err(Error::invalid(format!(
                "{} mask entries for {n} prototypes",
                mask.len()
            )));
        }
    }
    let eps = step_size(spec, q);
    let reference = protos.matrix().clone();
    let mut current = reference.clone();
    let mut best = current.clone();
    let mut best_loss = f64::NEG_INFINITY;
    let mut rng = rng;

    let mean_of = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;

    for _ in 0..spec.steps {
        let sampled_row = match mode {
            PrototypeMode::Joint => None,
            PrototypeMode::SampledPerIteration => match rng {
                Some(ref mut r) => Some(r.random_range(0..n)),
                None => return Err(Error::invalid("sampled prototype mode needs an rng")),
            },
        };

        let mut graph = Graph::new();
        let params = net.bind(&mut graph);
        let x_node = graph.leaf(xs.clone());
        let p_node = graph.leaf(current.clone());
        let per_sample =
            net.ce_per_sample_node(&mut graph, &params, x_node, p_node, labels, gamma)?;
        let loss = mean_of(graph.value(per_sample).data());
        if loss > best_loss {
            best_loss = loss;
            best = current.clone();
        }
        let mean = graph.mean(per_sample)?;
        let grad = graph.backward(mean)?.get(p_node).clone();

        let mut next = current.clone();
        for row in 0..n {
            let movable = active.map_or(true, |m| m[row])
                && sampled_row.map_or(true, |r| r == row);
            if !movable {
                continue;
            }
            let stepped: Vec<f64> = current.row(row)
                .iter()
                .zip(&grad.data()[row * q..(row + 1) * q])
                .map(|(&p, &g)| p + eps * sgn(g))
                .collect();
            let stepped = Tensor::from_vec(stepped)?;
            let refrow = Tensor::from_vec(reference.row(row).to_vec())?;
            let projected = project_l2(&stepped, &refrow, spec.magnitude, spec.clamp_bounds)?;
            next.data_mut()[row * q..(row + 1) * q].copy_from_slice(projected.data());
        }
        current = next;
    }

    let final_losses = batch_losses(net, xs, labels, &protos.with_matrix(current.clone())?, gamma)?;
    if mean_of(&final_losses) > best_loss {
        best = current;
    }
    protos.with_matrix(best)
}

/// White-box L2 attack on the prototype set for one labeled input. Every
/// prototype moves jointly each iteration; the originals are untouched.
pub fn l2_prototype_attack(
    net: &RelationNet,
    x: &Tensor,
    label_index: usize,
    protos: &PrototypeSet,
    spec: &AttackSpec,
) -> Result<PrototypeSet> {
    check_label(label_index, protos)?;
    let xs = as_row_matrix(x)?;
    prototype_attack_core(
        net,
        &xs,
        &[label_index],
        protos,
        spec,
        net.config.temperature,
        PrototypeMode::Joint,
        None,
        None,
    )
}

/// [`l2_prototype_attack`] updating one uniformly sampled prototype per
/// iteration instead of all of them.
pub fn l2_prototype_attack_sampled(
    net: &RelationNet,
    x: &Tensor,
    label_index: usize,
    protos: &PrototypeSet,
    spec: &AttackSpec,
    rng: &mut impl Rng,
) -> Result<PrototypeSet> {
    check_label(label_index, protos)?;
    let xs = as_row_matrix(x)?;
    prototype_attack_core(
        net,
        &xs,
        &[label_index],
        protos,
        spec,
        net.config.temperature,
        PrototypeMode::SampledPerIteration,
        None,
        Some(rng),
    )
}

/// The iterated sign-step-and-project loop shared by the white-box and
/// black-box input attacks, over a generic loss objective.
///
/// `objective` returns the loss and a gradient (exact or estimated) at a
/// point. Starting from `warm_start` (projected into the ball) or from
/// `x_ref`, the loop takes `spec.steps` steps of `ε·sign(gradient)` projected
/// back onto the L∞ ball and returns the best-loss point among the start and
/// every iterate.
pub fn sign_ascent_linf(
    objective: &mut dyn FnMut(&Tensor) -> Result<(f64, Tensor)>,
    x_ref: &Tensor,
    warm_start: Option<&Tensor>,
    spec: &AttackSpec,
) -> Result<Tensor> {
    spec.validate()?;
    if spec.norm != Norm::Linf {
        return Err(Error::invalid("sign_ascent_linf requires an L∞ spec"));
    }
    let eps = step_size(spec, x_ref.len());
    let mut current = match warm_start {
        Some(w) => project_linf(w, x_ref, spec.magnitude, spec.clamp_bounds)?,
        None => x_ref.clone(),
    };
    let mut best = current.clone();
    let mut best_loss = f64::NEG_INFINITY;
    for _ in 0..spec.steps {
        let (loss, grad) = objective(&current)?;
        grad.same_shape(&current, "sign ascent gradient")?;
        if loss > best_loss {
            best_loss = loss;
            best = current.clone();
        }
        let stepped: Vec<f64> = current
            .data()
            .iter()
            .zip(grad.data())
            .map(|(&v, &g)| v + eps * sgn(g))
            .collect();
        let stepped = Tensor::checked(x_ref.shape().to_vec(), stepped, "sign ascent step")?;
        current = project_linf(&stepped, x_ref, spec.magnitude, spec.clamp_bounds)?;
    }
    let (final_loss, _) = objective(&current)?;
    if final_loss > best_loss {
        best = current;
    }
    Ok(best)
}

/// Central-difference gradient estimate of a black-box loss on the given
/// coordinates; unvisited coordinates are reported as 0.
pub fn zo_gradient_estimate(
    oracle: &mut dyn FnMut(&Tensor) -> Result<f64>,
    x: &Tensor,
    h: f64,
    coords: &[usize],
) -> Result<Tensor> {
    let mut grad = vec![0.0; x.len()];
    for &i in coords {
        if i >= x.len() {
            return Err(Error::invalid(format!(
                "coordinate {i} out of range for dimension {}",
                x.len()
            )));
        }
        let mut plus = x.data().to_vec();
        plus[i] += h;
        let mut minus = x.data().to_vec();
        minus[i] -= h;
        let lp = oracle(&Tensor::checked(x.shape().to_vec(), plus, "zo probe")?)?;
        let lm = oracle(&Tensor::checked(x.shape().to_vec(), minus, "zo probe")?)?;
        grad[i] = (lp - lm) / (2.0 * h);
    }
    Tensor::checked(x.shape().to_vec(), grad, "zo gradient")
}

/// Finite-difference step used by the black-box attack, in input units.
pub const ZO_PROBE_STEP: f64 = 1e-3;

/// Black-box input attack: per step, estimate the gradient on a random
/// coordinate subset of size min(dim, 64) by central differences on the loss
/// oracle, then take the same sign-step-and-project loop as the white-box
/// attack. Returns the best-loss iterate.
pub fn zeroth_order_attack(
    oracle: &mut dyn FnMut(&Tensor) -> Result<f64>,
    x: &Tensor,
    spec: &AttackSpec,
    rng: &mut impl Rng,
) -> Result<Tensor> {
    spec.validate()?;
    if spec.target != AttackTarget::Input {
        return Err(Error::invalid(
            "zeroth-order attack perturbs inputs; spec must target the input space",
        ));
    }
    let d = x.len();
    let subset = d.min(64);
    let mut objective = |point: &Tensor| -> Result<(f64, Tensor)> {
        let loss = oracle(point)?;
        let coords = rand::seq::index::sample(rng, d, subset).into_vec();
        let grad = zo_gradient_estimate(oracle, point, ZO_PROBE_STEP, &coords)?;
        Ok((loss, grad))
    };
    sign_ascent_linf(&mut objective, x, None, spec)
}
