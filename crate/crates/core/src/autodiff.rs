//! Tape-based reverse-mode differentiation.
//!
//! A [`Record`] owns the active tape of the current thread. While it is
//! alive, every library op whose inputs include a tracked tensor appends a
//! node holding a backward closure. [`Record::backward`] walks the tape in
//! reverse and returns gradients for the leaves registered with
//! [`Record::track`]. Intermediate gradients are dropped as soon as they
//! have been propagated.

use std::cell::Cell;
use std::collections::HashMap;
use std::marker::PhantomData;
use std::sync::atomic::{AtomicU64, Ordering};

use crate::error::{Error, Result};
use crate::tensor::{Real, Shape, Tensor};

/// Handle of a node inside a specific record.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct NodeId {
    record: u64,
    index: usize,
}

/// Backward closure: receives the output gradient and a mask of which
/// inputs need a gradient, returns one optional gradient per input.
pub(crate) type BackwardFn<T> = Box<dyn Fn(&[T], &[bool]) -> Vec<Option<Vec<T>>>>;

struct Node<T: Real> {
    shape: Shape,
    parents: Vec<Option<usize>>,
    backward: Option<BackwardFn<T>>,
}

#[doc(hidden)]
pub struct Tape<T: Real> {
    id: u64,
    nodes: Vec<Node<T>>,
}

static NEXT_RECORD: AtomicU64 = AtomicU64::new(1);

thread_local! {
    static ACTIVE: Cell<Option<u64>> = const { Cell::new(None) };
}

/// Starts recording on the current thread.
pub fn record_begin<T: Real>() -> Result<Record<T>> {
    Record::begin()
}

/// Guard for the active record. Dropping it ends recording.
pub struct Record<T: Real> {
    id: u64,
    // Tapes are thread-local; the guard must not leave its thread.
    _marker: PhantomData<(*const (), T)>,
}

impl<T: Real> Record<T> {
    pub fn begin() -> Result<Self> {
        if ACTIVE.with(|a| a.get().is_some()) {
            return Err(Error::RecordActive);
        }
        let id = NEXT_RECORD.fetch_add(1, Ordering::Relaxed);
        ACTIVE.with(|a| a.set(Some(id)));
        T::tape().with(|t| *t.borrow_mut() = Some(Tape { id, nodes: Vec::new() }));
        Ok(Record { id, _marker: PhantomData })
    }

    /// Registers `t` as a leaf that receives a gradient.
    pub fn track(&self, t: &Tensor<T>) -> Tensor<T> {
        let index = T::tape().with(|tape| {
            let mut tape = tape.borrow_mut();
            let tape = tape.as_mut().expect("record guard alive");
            tape.nodes.push(Node { shape: t.shape(), parents: Vec::new(), backward: None });
            tape.nodes.len() - 1
        });
        t.detach().with_node(Some(NodeId { record: self.id, index }))
    }

    /// Number of nodes recorded so far.
    pub fn len(&self) -> usize {
        T::tape().with(|t| t.borrow().as_ref().map_or(0, |t| t.nodes.len()))
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Gradients of the scalar `loss` with respect to every tracked leaf.
    ///
    /// A constant loss yields an empty map. The tape is left intact, so
    /// calling this again returns identical gradients.
    pub fn backward(&self, loss: &Tensor<T>) -> Result<GradientMap<T>> {
        if loss.numel() != 1 {
            return Err(Error::NonScalarLoss(loss.shape()));
        }
        let Some(root) = loss.node else {
            return Ok(GradientMap { grads: HashMap::new() });
        };
        if root.record != self.id {
            return Err(Error::ForeignRecord);
        }
        T::tape().with(|tape| {
            let tape = tape.borrow();
            let tape = tape.as_ref().expect("record guard alive");
            debug_assert_eq!(tape.id, self.id);
            let mut grads: Vec<Option<Vec<T>>> = (0..=root.index).map(|_| None).collect();
            grads[root.index] = Some(vec![T::one()]);
            let mut leaves = HashMap::new();
            for i in (0..=root.index).rev() {
                let Some(g) = grads[i].take() else { continue };
                let node = &tape.nodes[i];
                match &node.backward {
                    None => {
                        leaves.insert(NodeId { record: self.id, index: i }, Tensor::from_parts(node.shape, g));
                    }
                    Some(f) => {
                        let need: Vec<bool> = node.parents.iter().map(Option::is_some).collect();
                        let parent_grads = f(&g, &need);
                        debug_assert_eq!(parent_grads.len(), node.parents.len());
                        for (parent, pg) in node.parents.iter().zip(parent_grads) {
                            let (Some(p), Some(pg)) = (parent, pg) else { continue };
                            match &mut grads[*p] {
                                Some(acc) => {
                                    for (a, v) in acc.iter_mut().zip(pg) {
                                        *a += v;
                                    }
                                }
                                slot @ None => *slot = Some(pg),
                            }
                        }
                    }
                }
            }
            Ok(GradientMap { grads: leaves })
        })
    }
}

impl<T: Real> Drop for Record<T> {
    fn drop(&mut self) {
        T::tape().with(|t| *t.borrow_mut() = None);
        ACTIVE.with(|a| a.set(None));
    }
}

/// Gradients of tracked leaves, keyed by node.
pub struct GradientMap<T: Real> {
    grads: HashMap<NodeId, Tensor<T>>,
}

impl<T: Real> GradientMap<T> {
    /// Gradient of a tracked leaf, if the loss depends on it.
    pub fn get(&self, leaf: &Tensor<T>) -> Option<&Tensor<T>> {
        leaf.node.and_then(|id| self.grads.get(&id))
    }

    /// Gradient of `leaf`, or zeros when the loss does not reach it.
    pub fn get_or_zeros(&self, leaf: &Tensor<T>) -> Tensor<T> {
        self.get(leaf).cloned().unwrap_or_else(|| Tensor::zeros(leaf.shape()))
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }
}

/// Builds the output tensor of an op, recording a node when any input is
/// tracked by the active record. Inputs tracked by an ended record are
/// treated as constants.
pub(crate) fn record_op<T, F>(shape: Shape, data: Vec<T>, inputs: &[&Tensor<T>], backward: F) -> Tensor<T>
where
    T: Real,
    F: Fn(&[T], &[bool]) -> Vec<Option<Vec<T>>> + 'static,
{
    let out = Tensor::from_parts(shape, data);
    if inputs.iter().all(|t| t.node.is_none()) {
        return out;
    }
    let node = T::tape().with(|tape| {
        let mut tape = tape.borrow_mut();
        let tape = tape.as_mut()?;
        let parents: Vec<Option<usize>> = inputs.iter().map(|t| t.node.filter(|id| id.record == tape.id).map(|id| id.index)).collect();
        if parents.iter().all(Option::is_none) {
            return None;
        }
        tape.nodes.push(Node { shape, parents, backward: Some(Box::new(backward)) });
        Some(NodeId { record: tape.id, index: tape.nodes.len() - 1 })
    });
    out.with_node(node)
}

/// Outcome of a finite-difference comparison.
#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// Maximum relative error per input tensor.
    pub per_input: Vec<f64>,
    /// (input, element, analytic, numeric) at the worst element.
    pub worst: Option<(usize, usize, f64, f64)>,
    pub evaluations: usize,
}

/// Maximum over all input elements of
/// `|analytic − numeric| / max(|analytic|, |numeric|, 1e-8)` where the
/// numeric derivative uses central differences of step `eps`.
pub fn grad_check<T, F>(f: F, inputs: &[Tensor<T>], eps: f64) -> Result<f64>
where
    T: Real,
    F: Fn(&[Tensor<T>]) -> Result<Tensor<T>>,
{
    grad_check_report(f, inputs, eps).map(|r| r.max_rel_error)
}

pub fn grad_check_report<T, F>(f: F, inputs: &[Tensor<T>], eps: f64) -> Result<GradCheckReport>
where
    T: Real,
    F: Fn(&[Tensor<T>]) -> Result<Tensor<T>>,
{
    if eps.is_nan() || eps <= 0.0 {
        return Err(Error::invalid("grad_check step must be positive"));
    }
    let analytic: Vec<Tensor<T>> = {
        let rec = Record::<T>::begin()?;
        let tracked: Vec<Tensor<T>> = inputs.iter().map(|t| rec.track(t)).collect();
        let out = f(&tracked)?;
        if out.numel() != 1 {
            return Err(Error::NonScalarLoss(out.shape()));
        }
        let grads = rec.backward(&out)?;
        tracked.iter().map(|t| grads.get_or_zeros(t)).collect()
    };

    let mut report = GradCheckReport { max_rel_error: 0.0, per_input: vec![0.0; inputs.len()], worst: None, evaluations: 0 };
    let mut work: Vec<Tensor<T>> = inputs.iter().map(Tensor::detach).collect();
    for (i, input) in inputs.iter().enumerate() {
        let base = input.to_vec();
        for j in 0..base.len() {
            let x = base[j].f64();
            let plus = T::of(x + eps);
            let minus = T::of(x - eps);
            let mut eval = |v: T| -> Result<f64> {
                let mut d = base.clone();
                d[j] = v;
                work[i] = Tensor::from_parts(input.shape(), d);
                let out = f(&work)?;
                if out.numel() != 1 {
                    return Err(Error::NonScalarLoss(out.shape()));
                }
                Ok(out.item().f64())
            };
            let fp = eval(plus)?;
            let fm = eval(minus)?;
            report.evaluations += 2;
            let numeric = (fp - fm) / (plus.f64() - minus.f64());
            let a = analytic[i].data()[j].f64();
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-8);
            if rel > report.per_input[i] {
                report.per_input[i] = rel;
            }
            if rel > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = report.max_rel_error.max(rel);
                report.worst = Some((i, j, a, numeric));
            }
        }
        work[i] = input.detach();
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ops;

    fn vec1(v: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(Shape::new(1, 1, 1, v.len()), v).unwrap()
    }

    #[test]
    fn square_gradient() {
        let rec = record_begin::<f64>().unwrap();
        let x = rec.track(&vec1(&[3.0]));
        let loss = ops::sum(&ops::mul(&x, &x).unwrap());
        let g = rec.backward(&loss).unwrap();
        assert_eq!(g.get(&x).unwrap().data(), &[6.0]);
    }

    #[test]
    fn sum_gives_ones() {
        let rec = record_begin::<f32>().unwrap();
        let x = rec.track(&Tensor::from_f64(Shape::new(2, 1, 2, 2), &[1., -2., 3., 0., 5., 6., 7., 8.]).unwrap());
        let g = rec.backward(&ops::sum(&x)).unwrap();
        assert!(g.get(&x).unwrap().data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn nested_begin_fails() {
        let _rec = record_begin::<f32>().unwrap();
        let err = record_begin::<f32>().err().unwrap();
        assert_eq!(err.to_string(), "record already active");
        assert!(matches!(record_begin::<f64>(), Err(Error::RecordActive)));
    }

    #[test]
    fn begin_after_drop_succeeds() {
        drop(record_begin::<f32>().unwrap());
        assert!(record_begin::<f32>().is_ok());
    }

    #[test]
    fn constant_loss_gives_empty_map() {
        let rec = record_begin::<f32>().unwrap();
        let g = rec.backward(&Tensor::scalar(2.0)).unwrap();
        assert!(g.is_empty());
    }

    #[test]
    fn relu_gradient_present() {
        let rec = record_begin::<f32>().unwrap();
        let x = rec.track(&Tensor::from_f64(Shape::new(1, 1, 1, 3), &[-1.0, 0.5, 2.0]).unwrap());
        let g = rec.backward(&ops::sum(&ops::relu(&x))).unwrap();
        assert_eq!(g.get(&x).unwrap().data(), &[0.0, 1.0, 1.0]);
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let rec = record_begin::<f32>().unwrap();
        let x = rec.track(&Tensor::ones(Shape::new(1, 1, 2, 2)));
        assert!(matches!(rec.backward(&x), Err(Error::NonScalarLoss(_))));
    }

    #[test]
    fn foreign_record_rejected() {
        let stale = {
            let rec = record_begin::<f32>().unwrap();
            let x = rec.track(&Tensor::ones(Shape::SCALAR));
            ops::scale(&x, 2.0)
        };
        let rec = record_begin::<f32>().unwrap();
        assert!(matches!(rec.backward(&stale), Err(Error::ForeignRecord)));
    }

    #[test]
    fn leaf_used_twice_accumulates() {
        let rec = record_begin::<f32>().unwrap();
        let x = rec.track(&Tensor::from_f64(Shape::new(1, 1, 1, 2), &[0.3, -4.0]).unwrap());
        let loss = ops::add(&ops::sum(&x), &ops::sum(&x)).unwrap();
        let g = rec.backward(&loss).unwrap();
        assert_eq!(g.get(&x).unwrap().data(), &[2.0, 2.0]);
    }

    #[test]
    fn backward_is_repeatable_bitwise() {
        let rec = record_begin::<f32>().unwrap();
        let x = rec.track(&Tensor::from_f64(Shape::new(1, 2, 2, 2), &[0.1, 0.7, -0.3, 1.1, 2.0, -1.5, 0.2, 0.9]).unwrap());
        let y = ops::sigmoid(&ops::mul(&x, &x).unwrap());
        let loss = ops::sum(&ops::softmax_channels(&y));
        let a = rec.backward(&loss).unwrap().get(&x).unwrap().bits();
        let b = rec.backward(&loss).unwrap().get(&x).unwrap().bits();
        assert_eq!(a, b);
    }

    #[test]
    fn grad_check_linear_is_tight() {
        let x = Tensor::<f64>::from_f64(Shape::new(1, 2, 2, 2), &[0.5, -1.25, 3.0, 0.75, -2.0, 1.5, 0.25, 4.0]).unwrap();
        let err = grad_check(|v| Ok(ops::sum(&ops::scale(&v[0], 2.0))), &[x], 1e-3).unwrap();
        assert!(err <= 1e-6, "{err}");
    }

    #[test]
    fn grad_check_in_single_precision() {
        // The f32 output rounding bounds how tight a single-precision check can be.
        let x = Tensor::<f32>::from_f64(Shape::new(1, 1, 1, 4), &[0.5, -0.25, 0.75, 0.125]).unwrap();
        let err = grad_check(|v| Ok(ops::sum(&ops::relu(&ops::scale(&v[0], 2.0)))), &[x], 1e-3).unwrap();
        assert!(err <= 1e-3, "{err}");
    }

    #[test]
    fn grad_check_relu_away_from_kink() {
        let x = Tensor::<f64>::from_f64(Shape::new(1, 1, 2, 3), &[0.5, -0.7, 1.2, -2.0, 0.3, 0.9]).unwrap();
        let err = grad_check(|v| Ok(ops::sum(&ops::relu(&v[0]))), &[x], 1e-3).unwrap();
        assert!(err <= 1e-3, "{err}");
    }

    #[test]
    fn grad_check_rejects_non_scalar() {
        let x = Tensor::<f64>::ones(Shape::new(1, 1, 2, 2));
        assert!(matches!(grad_check(|v| Ok(v[0].clone()), &[x], 1e-3), Err(Error::NonScalarLoss(_))));
    }
}
