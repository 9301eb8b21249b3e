//! Actor-critic MLP over a flat parameter vector.
//!
//! Layout: trunk `in -> h -> h` (tanh), actor head `h -> d` (linear),
//! state-independent log-std `d`, critic head `h -> 1`. Weights are stored
//! row-major `(out, in)`, each followed by its bias.

use nalgebra::DMatrix;
use ndarray::{s, Array1, Array2, ArrayView1, ArrayView2, ArrayViewMut1, ArrayViewMut2, Axis};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NetShape {
    pub input: usize,
    pub hidden: usize,
    pub action: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct Block {
    offset: usize,
    rows: usize,
    cols: usize,
}

impl Block {
    fn len(&self) -> usize {
        self.rows * self.cols
    }

    fn end(&self) -> usize {
        self.offset + self.len()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Layout {
    w1: Block,
    b1: Block,
    w2: Block,
    b2: Block,
    wa: Block,
    ba: Block,
    log_std: Block,
    wv: Block,
    bv: Block,
}

impl Layout {
    pub fn new(shape: NetShape) -> Self {
        let mut offset = 0;
        let mut block = |rows, cols| {
            let b = Block { offset, rows, cols };
            offset += rows * cols;
            b
        };
        let NetShape { input, hidden, action } = shape;
        Self {
            w1: block(hidden, input),
            b1: block(hidden, 1),
            w2: block(hidden, hidden),
            b2: block(hidden, 1),
            wa: block(action, hidden),
            ba: block(action, 1),
            log_std: block(action, 1),
            wv: block(1, hidden),
            bv: block(1, 1),
        }
    }

    pub fn len(&self) -> usize {
        self.bv.end()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Parameters belonging to the policy head: actor weights, bias and log-std.
    pub fn actor_range(&self) -> std::ops::Range<usize> {
        self.wa.offset..self.log_std.end()
    }

    /// Named blocks in storage order, for checkpoint manifests.
    pub fn blocks(&self) -> [(&'static str, usize, usize, usize); 9] {
        let e = |name, b: Block| (name, b.offset, b.rows, b.cols);
        [
            e("trunk.0.weight", self.w1),
            e("trunk.0.bias", self.b1),
            e("trunk.1.weight", self.w2),
            e("trunk.1.bias", self.b2),
            e("actor.weight", self.wa),
            e("actor.bias", self.ba),
            e("actor.log_std", self.log_std),
            e("critic.weight", self.wv),
            e("critic.bias", self.bv),
        ]
    }
}

fn mat<'a>(p: &'a [f64], b: Block) -> ArrayView2<'a, f64> {
    ArrayView2::from_shape((b.rows, b.cols), &p[b.offset..b.end()]).expect("block fits")
}

fn vec_view<'a>(p: &'a [f64], b: Block) -> ArrayView1<'a, f64> {
    ArrayView1::from(&p[b.offset..b.end()])
}

fn mat_mut<'a>(p: &'a mut [f64], b: Block) -> ArrayViewMut2<'a, f64> {
    ArrayViewMut2::from_shape((b.rows, b.cols), &mut p[b.offset..b.end()]).expect("block fits")
}

fn vec_mut<'a>(p: &'a mut [f64], b: Block) -> ArrayViewMut1<'a, f64> {
    ArrayViewMut1::from(&mut p[b.offset..b.end()])
}

/// Intermediate activations kept for the backward pass.
#[derive(Debug, Clone)]
pub struct Forward {
    pub input: Array2<f64>,
    pub h1: Array2<f64>,
    pub h2: Array2<f64>,
    pub mean: Array2<f64>,
    pub value: Array1<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PolicyNet {
    pub shape: NetShape,
    pub layout: Layout,
    pub params: Vec<f64>,
}

/// (Semi-)orthogonal `rows x cols` matrix scaled by `gain`.
pub fn orthogonal<R: Rng + ?Sized>(rows: usize, cols: usize, gain: f64, rng: &mut R) -> Array2<f64> {
    let (r, c) = if rows >= cols { (rows, cols) } else { (cols, rows) };
    let a = DMatrix::<f64>::from_fn(r, c, |_, _| rng.sample(StandardNormal));
    let qr = a.qr();
    let mut q = qr.q();
    let rm = qr.r();
    for j in 0..c {
        if rm[(j, j)] < 0.0 {
            q.column_mut(j).neg_mut();
        }
    }
    let mut out = Array2::zeros((rows, cols));
    for i in 0..rows {
        for j in 0..cols {
            out[(i, j)] = gain * if rows >= cols { q[(i, j)] } else { q[(j, i)] };
        }
    }
    out
}

impl PolicyNet {
    /// Orthogonal hidden layers with gain `sqrt(2)`, zero actor head,
    /// log-std `log_std0`, unit-gain orthogonal critic head.
    pub fn new<R: Rng + ?Sized>(shape: NetShape, log_std0: f64, rng: &mut R) -> Self {
        let layout = Layout::new(shape);
        let mut params = vec![0.0; layout.len()];
        let g = std::f64::consts::SQRT_2;
        mat_mut(&mut params, layout.w1).assign(&orthogonal(shape.hidden, shape.input, g, rng));
        mat_mut(&mut params, layout.w2).assign(&orthogonal(shape.hidden, shape.hidden, g, rng));
        mat_mut(&mut params, layout.wv).assign(&orthogonal(1, shape.hidden, 1.0, rng));
        vec_mut(&mut params, layout.log_std).fill(log_std0);
        Self { shape, layout, params }
    }

    pub fn from_params(shape: NetShape, params: Vec<f64>) -> Result<Self> {
        let layout = Layout::new(shape);
        if params.len() != layout.len() {
            return Err(Error::Dimension {
                expected: layout.len(),
                got: params.len(),
            });
        }
        Ok(Self { shape, layout, params })
    }

    pub fn log_std(&self) -> ArrayView1<'_, f64> {
        vec_view(&self.params, self.layout.log_std)
    }

    pub fn actor_params(&self) -> &[f64] {
        &self.params[self.layout.actor_range()]
    }

    /// Batched forward pass over rows of `input`.
    pub fn forward(&self, input: Array2<f64>) -> Result<Forward> {
        if input.ncols() != self.shape.input {
            return Err(Error::Dimension {
                expected: self.shape.input,
                got: input.ncols(),
            });
        }
        if input.iter().any(|x| !x.is_finite()) {
            return Err(Error::Inference("non-finite policy input".into()));
        }
        let p = &self.params;
        let l = &self.layout;
        let mut h1 = input.dot(&mat(p, l.w1).t()) + &vec_view(p, l.b1);
        h1.mapv_inplace(f64::tanh);
        let mut h2 = h1.dot(&mat(p, l.w2).t()) + &vec_view(p, l.b2);
        h2.mapv_inplace(f64::tanh);
        let mean = h2.dot(&mat(p, l.wa).t()) + &vec_view(p, l.ba);
        let value = h2.dot(&mat(p, l.wv).row(0)) + p[l.bv.offset];
        Ok(Forward {
            input,
            h1,
            h2,
            mean,
            value,
        })
    }

    /// Single-input forward: `(mean, value)`.
    pub fn forward_one(&self, input: &[f64]) -> Result<(Vec<f64>, f64)> {
        let x = Array2::from_shape_vec((1, input.len()), input.to_vec()).expect("row vector");
        let f = self.forward(x)?;
        Ok((f.mean.row(0).to_vec(), f.value[0]))
    }

    /// Gradient of a loss given its partials w.r.t. the outputs.
    ///
    /// `d_mean` is `(batch, action)`, `d_value` is `(batch)`, `d_log_std` is `(action)`.
    pub fn backward(&self, fwd: &Forward, d_mean: &Array2<f64>, d_value: &Array1<f64>, d_log_std: &Array1<f64>) -> Vec<f64> {
        let p = &self.params;
        let l = &self.layout;
        let mut g = vec![0.0; l.len()];

        mat_mut(&mut g, l.wa).assign(&d_mean.t().dot(&fwd.h2));
        vec_mut(&mut g, l.ba).assign(&d_mean.sum_axis(Axis(0)));
        vec_mut(&mut g, l.log_std).assign(d_log_std);
        mat_mut(&mut g, l.wv)
            .row_mut(0)
            .assign(&d_value.view().insert_axis(Axis(1)).t().dot(&fwd.h2).row(0));
        g[l.bv.offset] = d_value.sum();

        let mut dh2 = d_mean.dot(&mat(p, l.wa));
        dh2 += &(d_value.view().insert_axis(Axis(1)).dot(&mat(p, l.wv)));
        let dz2 = dh2 * &fwd.h2.mapv(|h| 1.0 - h * h);
        mat_mut(&mut g, l.w2).assign(&dz2.t().dot(&fwd.h1));
        vec_mut(&mut g, l.b2).assign(&dz2.sum_axis(Axis(0)));

        let dh1 = dz2.dot(&mat(p, l.w2));
        let dz1 = dh1 * &fwd.h1.mapv(|h| 1.0 - h * h);
        mat_mut(&mut g, l.w1).assign(&dz1.t().dot(&fwd.input));
        vec_mut(&mut g, l.b1).assign(&dz1.sum_axis(Axis(0)));
        g
    }
}

/// Stack rows into a batch matrix.
pub fn batch(rows: &[&[f64]]) -> Array2<f64> {
    let cols = rows.first().map_or(0, |r| r.len());
    let mut out = Array2::zeros((rows.len(), cols));
    for (i, r) in rows.iter().enumerate() {
        out.slice_mut(s![i, ..]).assign(&ArrayView1::from(*r));
    }
    out
}
