//! Record-and-replay reverse mode over the fixed set of operations the model needs.

use crate::cif::{self, CifConfig, CifMode, FireTrace};

use super::{ops, NnError, ParamSet, Tensor2};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Input,
    Param(String),
    Linear {
        x: NodeId,
        w: NodeId,
        b: Option<NodeId>,
    },
    Relu(NodeId),
    Conv1d {
        x: NodeId,
        kernel: NodeId,
    },
    Sigmoid(NodeId),
    ScaleToLength {
        alpha: NodeId,
        target: usize,
    },
    Cif {
        frames: NodeId,
        alpha: NodeId,
        trace: FireTrace,
    },
}

#[derive(Debug, Clone)]
struct Node {
    op: Op,
    value: Tensor2,
}

/// Operation tape. Each builder method runs the forward computation immediately and
/// records what `backward` needs.
#[derive(Debug, Clone, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients of a scalar objective with respect to every recorded node.
#[derive(Debug, Clone)]
pub struct Grads {
    grads: Vec<Option<Tensor2>>,
    params: Vec<(String, NodeId)>,
}

impl Grads {
    pub fn get(&self, id: NodeId) -> Option<&Tensor2> {
        self.grads.get(id.0).and_then(Option::as_ref)
    }

    /// Adds every parameter gradient into the matching accumulator of `params`.
    pub fn accumulate_into(&self, params: &mut ParamSet) -> Result<(), NnError> {
        for (name, id) in &self.params {
            if let Some(g) = self.get(*id) {
                params.accumulate_grad(name, g)?;
            }
        }
        Ok(())
    }
}

fn column_values(t: &Tensor2) -> Result<&[f64], NnError> {
    if t.cols() != 1 {
        return Err(NnError::Shape(format!(
            "expected a column of weights, got {}x{}",
            t.rows(),
            t.cols()
        )));
    }
    Ok(t.data())
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor2 {
        &self.nodes[id.0].value
    }

    /// Firing trace recorded by a CIF node.
    pub fn trace(&self, id: NodeId) -> Option<&FireTrace> {
        match &self.nodes[id.0].op {
            Op::Cif { trace, .. } => Some(trace),
            _ => None,
        }
    }

    fn push(&mut self, op: Op, value: Tensor2) -> Result<NodeId, NnError> {
        if !value.is_finite() {
            return Err(NnError::Numeric("forward produced a non-finite value".into()));
        }
        self.nodes.push(Node { op, value });
        Ok(NodeId(self.nodes.len() - 1))
    }

    pub fn input(&mut self, value: Tensor2) -> Result<NodeId, NnError> {
        self.push(Op::Input, value)
    }

    pub fn param(&mut self, params: &ParamSet, name: &str) -> Result<NodeId, NnError> {
        let value = params.value(name)?.clone();
        self.push(Op::Param(name.to_string()), value)
    }

    pub fn linear(&mut self, x: NodeId, w: NodeId, b: Option<NodeId>) -> Result<NodeId, NnError> {
        let y = ops::linear(self.value(x), self.value(w), b.map(|b| self.value(b)))?;
        self.push(Op::Linear { x, w, b }, y)
    }

    pub fn relu(&mut self, x: NodeId) -> Result<NodeId, NnError> {
        let y = ops::relu(self.value(x));
        self.push(Op::Relu(x), y)
    }

    pub fn conv1d(&mut self, x: NodeId, kernel: NodeId) -> Result<NodeId, NnError> {
        let y = ops::conv1d(self.value(x), self.value(kernel))?;
        self.push(Op::Conv1d { x, kernel }, y)
    }

    pub fn sigmoid(&mut self, x: NodeId) -> Result<NodeId, NnError> {
        let y = ops::sigmoid(self.value(x));
        self.push(Op::Sigmoid(x), y)
    }

    /// `alpha` must be a `T x 1` column.
    pub fn scale_to_length(&mut self, alpha: NodeId, target: usize) -> Result<NodeId, NnError> {
        let scaled = cif::scale_to_length(column_values(self.value(alpha))?, target)?;
        self.push(Op::ScaleToLength { alpha, target }, Tensor2::column(&scaled))
    }

    pub fn cif(
        &mut self,
        frames: NodeId,
        alpha: NodeId,
        cfg: &CifConfig,
        mode: CifMode,
    ) -> Result<NodeId, NnError> {
        let (fired, trace) = cif::cif_forward(
            self.value(frames),
            column_values(self.value(alpha))?,
            cfg,
            mode,
        )?;
        self.push(
            Op::Cif {
                frames,
                alpha,
                trace,
            },
            fired,
        )
    }

    /// Reverse pass. `seeds` are gradients of the objective with respect to node values;
    /// several seeds on one node are summed.
    pub fn backward(&self, seeds: &[(NodeId, Tensor2)]) -> Result<Grads, NnError> {
        if self.nodes.is_empty() {
            return Err(NnError::State("backward called on an empty tape".into()));
        }
        let mut grads: Vec<Option<Tensor2>> = vec![None; self.nodes.len()];
        for (id, g) in seeds {
            let node = self
                .nodes
                .get(id.0)
                .ok_or_else(|| NnError::State(format!("seed for unknown node {}", id.0)))?;
            g.expect_shape(node.value.shape(), "seed gradient")?;
            add_grad(&mut grads, *id, g.clone())?;
        }

        for idx in (0..self.nodes.len()).rev() {
            let Some(g) = grads[idx].take() else {
                continue;
            };
            let node = &self.nodes[idx];
            match &node.op {
                Op::Input | Op::Param(_) => {}
                Op::Linear { x, w, b } => {
                    let (gx, gw, gb) = ops::linear_backward(self.value(*x), self.value(*w), &g)?;
                    add_grad(&mut grads, *x, gx)?;
                    add_grad(&mut grads, *w, gw)?;
                    if let Some(b) = b {
                        add_grad(&mut grads, *b, gb)?;
                    }
                }
                Op::Relu(x) => {
                    let gx = ops::relu_backward(self.value(*x), &g)?;
                    add_grad(&mut grads, *x, gx)?;
                }
                Op::Conv1d { x, kernel } => {
                    let (gx, gk) = ops::conv1d_backward(self.value(*x), self.value(*kernel), &g)?;
                    add_grad(&mut grads, *x, gx)?;
                    add_grad(&mut grads, *kernel, gk)?;
                }
                Op::Sigmoid(x) => {
                    let gx = ops::sigmoid_backward(&node.value, &g)?;
                    add_grad(&mut grads, *x, gx)?;
                }
                Op::ScaleToLength { alpha, target } => {
                    let a = self.value(*alpha).data();
                    let ga = cif::scale_to_length_backward(a, *target, g.data());
                    add_grad(&mut grads, *alpha, Tensor2::column(&ga))?;
                }
                Op::Cif {
                    frames,
                    alpha,
                    trace,
                } => {
                    let (gf, ga) =
                        cif::cif_backward(self.value(*frames), self.value(*alpha).data(), trace, &g)?;
                    add_grad(&mut grads, *frames, gf)?;
                    add_grad(&mut grads, *alpha, Tensor2::column(&ga))?;
                }
            }
            grads[idx] = Some(g);
        }

        let params = self
            .nodes
            .iter()
            .enumerate()
            .filter_map(|(i, n)| match &n.op {
                Op::Param(name) => Some((name.clone(), NodeId(i))),
                _ => None,
            })
            .collect();
        Ok(Grads { grads, params })
    }
}

fn add_grad(grads: &mut [Option<Tensor2>], id: NodeId, g: Tensor2) -> Result<(), NnError> {
    if !g.is_finite() {
        return Err(NnError::Numeric(format!("non-finite gradient reaching node {}", id.0)));
    }
    match &mut grads[id.0] {
        Some(existing) => existing.add_assign(&g)?,
        slot @ None => *slot = Some(g),
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn backward_on_empty_tape_is_state_error() {
        assert!(matches!(Tape::new().backward(&[]), Err(NnError::State(_))));
    }

    #[test]
    fn sigmoid_at_zero_quarter_gradient() {
        let mut tape = Tape::new();
        let x = tape.input(Tensor2::column(&[0.0])).unwrap();
        let y = tape.sigmoid(x).unwrap();
        let grads = tape.backward(&[(y, Tensor2::column(&[2.0]))]).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[0.5]);
    }

    #[test]
    fn param_gradients_flow_into_param_set() {
        let mut ps = ParamSet::new();
        ps.insert("w", Tensor2::identity(2)).unwrap();
        let mut tape = Tape::new();
        let x = tape.input(Tensor2::from_rows(&[vec![1.0, 2.0]]).unwrap()).unwrap();
        let w = tape.param(&ps, "w").unwrap();
        let y = tape.linear(x, w, None).unwrap();
        let g = Tensor2::from_rows(&[vec![3.0, 4.0]]).unwrap();
        let grads = tape.backward(&[(y, g.clone())]).unwrap();
        assert_eq!(grads.get(x).unwrap(), &g);
        grads.accumulate_into(&mut ps).unwrap();
        assert_eq!(ps.grad("w").unwrap().data(), &[3.0, 4.0, 6.0, 8.0]);
    }

    #[test]
    fn seed_shape_checked() {
        let mut tape = Tape::new();
        let x = tape.input(Tensor2::zeros(2, 2)).unwrap();
        assert!(tape.backward(&[(x, Tensor2::zeros(1, 2))]).is_err());
    }
}
