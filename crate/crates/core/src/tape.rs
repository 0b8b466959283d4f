//! Minimal reverse-mode differentiation over dense `f64` matrices.
//!
//! Every operation appends a node holding its forward value; [`Tape::backward`]
//! walks the nodes in reverse and accumulates vector-Jacobian products. Only
//! the operations the graph encoder needs are provided.

use std::sync::Arc;

use ndarray::{concatenate, s, Array2, Axis};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    /// `a + 1·bias`, bias is `1 × cols`.
    AddRow(Var, Var),
    /// `a * s`, `s` is `1 × 1`.
    Scale(Var, Var),
    ScaleConst(Var, f64),
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    SliceRows(Var, usize),
    SelectRows(Var, Arc<Vec<usize>>),
    /// Picks `a[r, c]` for each `(r, c)` into a column vector.
    Gather(Var, Arc<Vec<(usize, usize)>>),
    /// Softmax of a column vector within groups given by a segment id per row.
    SegmentSoftmax(Var, Arc<Vec<usize>>),
    /// Row `k` of `a` times scalar `v[k, 0]`.
    MulCol(Var, Var),
    Tanh(Var),
    /// Mean of the rows of `a` sharing a segment id.
    SegmentMean(Var, Arc<Vec<usize>>),
}

#[derive(Debug)]
struct Node {
    value: Array2<f64>,
    op: Op,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Accumulated adjoints, indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Array2<f64>>>,
    shapes: Vec<(usize, usize)>,
}

impl Gradients {
    /// Adjoint of `v`, zeros if nothing flowed into it.
    pub fn wrt(&self, v: Var) -> Array2<f64> {
        self.grads[v.0]
            .clone()
            .unwrap_or_else(|| Array2::zeros(self.shapes[v.0]))
    }
}

fn accumulate(slot: &mut Option<Array2<f64>>, delta: Array2<f64>) {
    match slot {
        Some(g) => *g += &delta,
        None => *slot = Some(delta),
    }
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

    fn push(&mut self, value: Array2<f64>, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Array2<f64> {
        &self.nodes[v.0].value
    }

    pub fn leaf(&mut self, value: Array2<f64>) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).dot(self.value(b));
        self.push(v, Op::MatMul(a, b))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let v = self.value(a).t().to_owned();
        self.push(v, Op::Transpose(a))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a) + self.value(b);
        self.push(v, Op::Add(a, b))
    }

    pub fn add_row(&mut self, a: Var, bias: Var) -> Var {
        assert_eq!(self.value(bias).nrows(), 1, "bias must be a single row");
        let v = self.value(a) + self.value(bias);
        self.push(v, Op::AddRow(a, bias))
    }

    pub fn scale(&mut self, a: Var, s: Var) -> Var {
        assert_eq!(self.value(s).dim(), (1, 1), "scale factor must be 1x1");
        let v = self.value(a) * self.value(s)[[0, 0]];
        self.push(v, Op::Scale(a, s))
    }

    pub fn scale_const(&mut self, a: Var, c: f64) -> Var {
        let v = self.value(a) * c;
        self.push(v, Op::ScaleConst(a, c))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let views: Vec<_> = parts.iter().map(|&p| self.value(p).view()).collect();
        let v = concatenate(Axis(0), &views).expect("column counts must agree");
        self.push(v, Op::ConcatRows(parts.to_vec()))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let views: Vec<_> = parts.iter().map(|&p| self.value(p).view()).collect();
        let v = concatenate(Axis(1), &views).expect("row counts must agree");
        self.push(v, Op::ConcatCols(parts.to_vec()))
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Var {
        let v = self.value(a).slice(s![start..start + len, ..]).to_owned();
        self.push(v, Op::SliceRows(a, start))
    }

    pub fn select_rows(&mut self, a: Var, rows: Arc<Vec<usize>>) -> Var {
        let v = self.value(a).select(Axis(0), &rows);
        self.push(v, Op::SelectRows(a, rows))
    }

    pub fn gather(&mut self, a: Var, at: Arc<Vec<(usize, usize)>>) -> Var {
        let src = self.value(a);
        let v = Array2::from_shape_fn((at.len(), 1), |(k, _)| src[at[k]]);
        self.push(v, Op::Gather(a, at))
    }

    pub fn segment_softmax(&mut self, a: Var, segments: Arc<Vec<usize>>) -> Var {
        let x = self.value(a);
        assert_eq!(x.ncols(), 1, "segment softmax expects a column vector");
        assert_eq!(x.nrows(), segments.len());
        let n_seg = segments.iter().copied().max().map_or(0, |m| m + 1);
        let mut max = vec![f64::NEG_INFINITY; n_seg];
        for (k, &g) in segments.iter().enumerate() {
            max[g] = max[g].max(x[[k, 0]]);
        }
        let mut out = Array2::zeros(x.dim());
        let mut sum = vec![0.0; n_seg];
        for (k, &g) in segments.iter().enumerate() {
            let e = (x[[k, 0]] - max[g]).exp();
            out[[k, 0]] = e;
            sum[g] += e;
        }
        for (k, &g) in segments.iter().enumerate() {
            out[[k, 0]] /= sum[g];
        }
        self.push(out, Op::SegmentSoftmax(a, segments))
    }

    pub fn mul_col(&mut self, a: Var, col: Var) -> Var {
        let c = self.value(col);
        assert_eq!(c.ncols(), 1);
        let v = self.value(a) * c;
        self.push(v, Op::MulCol(a, col))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(f64::tanh);
        self.push(v, Op::Tanh(a))
    }

    /// Mean over rows grouped by `segments`; the output has one row per
    /// segment id `0..=max`. Every segment must be non-empty.
    pub fn segment_mean(&mut self, a: Var, segments: Arc<Vec<usize>>) -> Var {
        let x = self.value(a);
        assert_eq!(x.nrows(), segments.len());
        let n_seg = segments.iter().copied().max().map_or(0, |m| m + 1);
        let mut out = Array2::zeros((n_seg, x.ncols()));
        let mut count = vec![0usize; n_seg];
        for (k, &g) in segments.iter().enumerate() {
            let mut row = out.row_mut(g);
            row += &x.row(k);
            count[g] += 1;
        }
        for (g, mut row) in out.rows_mut().into_iter().enumerate() {
            assert!(count[g] > 0, "segment {g} is empty");
            row /= count[g] as f64;
        }
        self.push(out, Op::SegmentMean(a, segments))
    }

    /// Back-propagates `seed` (the adjoint of `output`) through the tape.
    pub fn backward(&self, output: Var, seed: Array2<f64>) -> Gradients {
        assert_eq!(seed.dim(), self.value(output).dim(), "seed shape mismatch");
        let mut grads: Vec<Option<Array2<f64>>> = vec![None; self.nodes.len()];
        grads[output.0] = Some(seed);
        for idx in (0..=output.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            match &node.op {
                Op::Leaf => {}
                Op::MatMul(a, b) => {
                    let ga = g.dot(&self.value(*b).t());
                    let gb = self.value(*a).t().dot(&g);
                    accumulate(&mut grads[a.0], ga);
                    accumulate(&mut grads[b.0], gb);
                }
                Op::Transpose(a) => accumulate(&mut grads[a.0], g.t().to_owned()),
                Op::Add(a, b) => {
                    accumulate(&mut grads[a.0], g.clone());
                    accumulate(&mut grads[b.0], g.clone());
                }
                Op::AddRow(a, bias) => {
                    let gb = g.sum_axis(Axis(0)).insert_axis(Axis(0));
                    accumulate(&mut grads[bias.0], gb);
                    accumulate(&mut grads[a.0], g.clone());
                }
                Op::Scale(a, s) => {
                    let factor = self.value(*s)[[0, 0]];
                    let gs = (&g * self.value(*a)).sum();
                    accumulate(&mut grads[s.0], Array2::from_elem((1, 1), gs));
                    accumulate(&mut grads[a.0], &g * factor);
                }
                Op::ScaleConst(a, c) => accumulate(&mut grads[a.0], &g * *c),
                Op::ConcatRows(parts) => {
                    let mut start = 0;
                    for p in parts {
                        let rows = self.value(*p).nrows();
                        accumulate(&mut grads[p.0], g.slice(s![start..start + rows, ..]).to_owned());
                        start += rows;
                    }
                }
                Op::ConcatCols(parts) => {
                    let mut start = 0;
                    for p in parts {
                        let cols = self.value(*p).ncols();
                        accumulate(&mut grads[p.0], g.slice(s![.., start..start + cols]).to_owned());
                        start += cols;
                    }
                }
                Op::SliceRows(a, start) => {
                    let mut ga = Array2::zeros(self.value(*a).dim());
                    ga.slice_mut(s![*start..*start + g.nrows(), ..]).assign(&g);
                    accumulate(&mut grads[a.0], ga);
                }
                Op::SelectRows(a, rows) => {
                    let mut ga = Array2::zeros(self.value(*a).dim());
                    for (k, &r) in rows.iter().enumerate() {
                        let mut dst = ga.row_mut(r);
                        dst += &g.row(k);
                    }
                    accumulate(&mut grads[a.0], ga);
                }
                Op::Gather(a, at) => {
                    let mut ga = Array2::zeros(self.value(*a).dim());
                    for (k, &pos) in at.iter().enumerate() {
                        ga[pos] += g[[k, 0]];
                    }
                    accumulate(&mut grads[a.0], ga);
                }
                Op::SegmentSoftmax(a, segments) => {
                    let y = &node.value;
                    let n_seg = segments.iter().copied().max().map_or(0, |m| m + 1);
                    let mut inner = vec![0.0; n_seg];
                    for (k, &seg) in segments.iter().enumerate() {
                        inner[seg] += g[[k, 0]] * y[[k, 0]];
                    }
                    let ga = Array2::from_shape_fn(y.dim(), |(k, _)| {
                        y[[k, 0]] * (g[[k, 0]] - inner[segments[k]])
                    });
                    accumulate(&mut grads[a.0], ga);
                }
                Op::MulCol(a, col) => {
                    let av = self.value(*a);
                    let cv = self.value(*col);
                    let gc = (&g * av).sum_axis(Axis(1)).insert_axis(Axis(1));
                    accumulate(&mut grads[col.0], gc);
                    accumulate(&mut grads[a.0], &g * cv);
                }
                Op::Tanh(a) => {
                    let ga = &g * &node.value.mapv(|t| 1.0 - t * t);
                    accumulate(&mut grads[a.0], ga);
                }
                Op::SegmentMean(a, segments) => {
                    let n_seg = node.value.nrows();
                    let mut count = vec![0usize; n_seg];
                    segments.iter().for_each(|&seg| count[seg] += 1);
                    let av = self.value(*a);
                    let mut ga = Array2::zeros(av.dim());
                    for (k, &seg) in segments.iter().enumerate() {
                        let mut row = ga.row_mut(k);
                        row.assign(&g.row(seg));
                        row /= count[seg] as f64;
                    }
                    accumulate(&mut grads[a.0], ga);
                }
            }
            grads[idx] = Some(g);
        }
        Gradients {
            grads,
            shapes: self.nodes.iter().map(|n| n.value.dim()).collect(),
        }
    }
}
