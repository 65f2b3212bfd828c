//! Dense 64-bit kernels shared by the model, loss and clustering code.
//!
//! Every reduction accumulates in a fixed left-to-right order, so outputs
//! are bit-identical across runs and across thread counts.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::par;

/// Work (in multiply-adds) below which kernels stay on the calling thread.
const PAR_THRESHOLD: usize = 1 << 15;

/// Row-major dense matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenseMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl DenseMatrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Shape(format!(
                "{rows}x{cols} matrix needs {} values, got {}",
                rows * cols,
                data.len()
            )));
        }
        Ok(Self { rows, cols, data })
    }

    /// Like [`DenseMatrix::from_vec`], but also rejects NaN and infinities.
    /// Used for anything read from disk.
    pub fn from_input(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!(
                "non-finite value at row {}, col {}",
                i / cols.max(1),
                i % cols.max(1)
            )));
        }
        Self::from_vec(rows, cols, data)
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for (i, r) in rows.iter().enumerate() {
            if r.len() != cols {
                return Err(Error::Shape(format!(
                    "row {i} has {} columns, expected {cols}",
                    r.len()
                )));
            }
            data.extend_from_slice(r);
        }
        Ok(Self {
            rows: rows.len(),
            cols,
            data,
        })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.cols + j] = v;
    }

    pub fn transpose(&self) -> DenseMatrix {
        let mut out = DenseMatrix::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                out.data[j * self.rows + i] = self.data[i * self.cols + j];
            }
        }
        out
    }
}

/// Shape of a channel-major feature grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct GridShape {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

impl GridShape {
    pub fn new(channels: usize, height: usize, width: usize) -> Self {
        Self {
            channels,
            height,
            width,
        }
    }

    pub fn len(&self) -> usize {
        self.channels * self.height * self.width
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn plane(&self) -> usize {
        self.height * self.width
    }

    /// Output shape of a valid, stride-1 convolution with `out_channels`
    /// square kernels of side `kernel`.
    pub fn after_conv(&self, kernel: usize, out_channels: usize) -> Result<GridShape> {
        if kernel == 0 || kernel > self.height || kernel > self.width {
            return Err(Error::Shape(format!(
                "kernel {kernel} does not fit a {}x{} grid",
                self.height, self.width
            )));
        }
        Ok(GridShape::new(
            out_channels,
            self.height - kernel + 1,
            self.width - kernel + 1,
        ))
    }
}

/// Channel-major (c, y, x) grid of features.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureGrid {
    shape: GridShape,
    data: Vec<f64>,
}

impl FeatureGrid {
    pub fn new(shape: GridShape, data: Vec<f64>) -> Result<Self> {
        if data.len() != shape.len() {
            return Err(Error::Shape(format!(
                "{}x{}x{} grid needs {} values, got {}",
                shape.channels,
                shape.height,
                shape.width,
                shape.len(),
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: GridShape) -> Self {
        Self {
            shape,
            data: vec![0.0; shape.len()],
        }
    }

    pub fn shape(&self) -> GridShape {
        self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn at(&self, c: usize, y: usize, x: usize) -> f64 {
        self.data[(c * self.shape.height + y) * self.shape.width + x]
    }
}

/// Bank of `out_channels` kernels, each `in_channels x size x size`,
/// stored as (out, in, dy, dx) row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KernelBank {
    pub out_channels: usize,
    pub in_channels: usize,
    pub size: usize,
    pub data: Vec<f64>,
}

impl KernelBank {
    pub fn zeros(out_channels: usize, in_channels: usize, size: usize) -> Self {
        Self {
            out_channels,
            in_channels,
            size,
            data: vec![0.0; out_channels * in_channels * size * size],
        }
    }

    pub fn per_output(&self) -> usize {
        self.in_channels * self.size * self.size
    }

    fn idx(&self, o: usize, c: usize, dy: usize, dx: usize) -> usize {
        ((o * self.in_channels + c) * self.size + dy) * self.size + dx
    }
}

/// Matrix product `a * b`.
pub fn matmul(a: &DenseMatrix, b: &DenseMatrix) -> Result<DenseMatrix> {
    if a.cols != b.rows {
        return Err(Error::Shape(format!(
            "cannot multiply {}x{} by {}x{}",
            a.rows, a.cols, b.rows, b.cols
        )));
    }
    let mut out = DenseMatrix::zeros(a.rows, b.cols);
    let n = b.cols;
    let row_kernel = |i: usize, out_row: &mut [f64]| {
        let a_row = a.row(i);
        for (p, &a_ip) in a_row.iter().enumerate() {
            let b_row = &b.data[p * n..(p + 1) * n];
            for (o, &b_pj) in out_row.iter_mut().zip(b_row) {
                *o += a_ip * b_pj;
            }
        }
    };
    if a.rows * a.cols * n >= PAR_THRESHOLD {
        par::for_each_row_mut(&mut out.data, n, row_kernel);
    } else if n > 0 {
        for (i, row) in out.data.chunks_mut(n).enumerate() {
            row_kernel(i, row);
        }
    }
    Ok(out)
}

/// Affine map `weight * x + bias`, with `weight` stored (out x in).
pub fn affine(weight: &DenseMatrix, bias: &[f64], x: &[f64]) -> Result<Vec<f64>> {
    if weight.cols != x.len() || weight.rows != bias.len() {
        return Err(Error::Shape(format!(
            "affine map {}x{} (bias {}) applied to length {}",
            weight.rows,
            weight.cols,
            bias.len(),
            x.len()
        )));
    }
    Ok((0..weight.rows)
        .map(|i| dot(weight.row(i), x) + bias[i])
        .collect())
}

/// `weightᵀ * g` for `weight` stored (out x in); the input-side gradient of
/// an affine map.
pub fn affine_input_grad(weight: &DenseMatrix, g: &[f64]) -> Vec<f64> {
    debug_assert_eq!(weight.rows, g.len());
    let mut out = vec![0.0; weight.cols];
    for (i, &gi) in g.iter().enumerate() {
        if gi == 0.0 {
            continue;
        }
        for (o, &w) in out.iter_mut().zip(weight.row(i)) {
            *o += w * gi;
        }
    }
    out
}

/// `acc += g ⊗ x`, the weight gradient of an affine map.
pub fn add_outer(acc: &mut DenseMatrix, g: &[f64], x: &[f64]) {
    debug_assert_eq!(acc.rows, g.len());
    debug_assert_eq!(acc.cols, x.len());
    for (i, &gi) in g.iter().enumerate() {
        if gi == 0.0 {
            continue;
        }
        for (a, &xj) in acc.row_mut(i).iter_mut().zip(x) {
            *a += gi * xj;
        }
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).fold(0.0, |s, (x, y)| s + x * y)
}

/// Elementwise `acc += x`.
pub fn add_assign(acc: &mut [f64], x: &[f64]) {
    for (a, b) in acc.iter_mut().zip(x) {
        *a += b;
    }
}

pub fn squared_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).fold(0.0, |s, (x, y)| {
        let d = x - y;
        s + d * d
    })
}

/// Logistic function, evaluated so that `exp` never sees a large positive
/// argument.
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn relu(x: &DenseMatrix) -> DenseMatrix {
    DenseMatrix {
        rows: x.rows,
        cols: x.cols,
        data: relu_slice(&x.data),
    }
}

pub fn relu_slice(x: &[f64]) -> Vec<f64> {
    x.iter().map(|&v| v.max(0.0)).collect()
}

fn check_conv(input: GridShape, kernels: &KernelBank, kernel_size: usize) -> Result<GridShape> {
    if kernels.size != kernel_size {
        return Err(Error::Shape(format!(
            "kernel bank has size {}, expected {kernel_size}",
            kernels.size
        )));
    }
    if kernels.in_channels != input.channels {
        return Err(Error::Shape(format!(
            "kernel bank expects {} input channels, grid has {}",
            kernels.in_channels, input.channels
        )));
    }
    input.after_conv(kernel_size, kernels.out_channels)
}

/// Valid (no padding, stride 1) cross-correlation.
pub fn conv2d_valid(
    input: &FeatureGrid,
    kernels: &KernelBank,
    kernel_size: usize,
) -> Result<FeatureGrid> {
    let in_shape = input.shape;
    let out_shape = check_conv(in_shape, kernels, kernel_size)?;
    let mut out = FeatureGrid::zeros(out_shape);
    let k = kernel_size;
    let (oh, ow) = (out_shape.height, out_shape.width);
    let per_channel = |o: usize, plane: &mut [f64]| {
        for c in 0..in_shape.channels {
            let src = &input.data[c * in_shape.plane()..(c + 1) * in_shape.plane()];
            for dy in 0..k {
                for dx in 0..k {
                    let w = kernels.data[kernels.idx(o, c, dy, dx)];
                    if w == 0.0 {
                        continue;
                    }
                    for y in 0..oh {
                        let src_row = &src[(y + dy) * in_shape.width + dx..][..ow];
                        for (p, &s) in plane[y * ow..(y + 1) * ow].iter_mut().zip(src_row) {
                            *p += w * s;
                        }
                    }
                }
            }
        }
    };
    run_rows(
        &mut out.data,
        out_shape.plane(),
        out_shape.plane() * kernels.data.len(),
        per_channel,
    );
    Ok(out)
}

/// Gradients of a valid convolution given the output gradient `grad_out`.
/// Returns (input gradient, kernel gradient).
pub fn conv2d_valid_backward(
    input: &FeatureGrid,
    kernels: &KernelBank,
    grad_out: &FeatureGrid,
) -> Result<(FeatureGrid, KernelBank)> {
    let in_shape = input.shape;
    let out_shape = check_conv(in_shape, kernels, kernels.size)?;
    if grad_out.shape != out_shape {
        return Err(Error::Shape("output gradient does not match conv output".into()));
    }
    let k = kernels.size;
    let (oh, ow) = (out_shape.height, out_shape.width);
    let work = out_shape.plane() * kernels.data.len();

    let mut grad_in = FeatureGrid::zeros(in_shape);
    run_rows(&mut grad_in.data, in_shape.plane(), work, |c, plane| {
        for o in 0..out_shape.channels {
            let g = &grad_out.data[o * out_shape.plane()..(o + 1) * out_shape.plane()];
            for dy in 0..k {
                for dx in 0..k {
                    let w = kernels.data[kernels.idx(o, c, dy, dx)];
                    if w == 0.0 {
                        continue;
                    }
                    for y in 0..oh {
                        let dst = &mut plane[(y + dy) * in_shape.width + dx..][..ow];
                        for (d, &gv) in dst.iter_mut().zip(&g[y * ow..(y + 1) * ow]) {
                            *d += w * gv;
                        }
                    }
                }
            }
        }
    });

    let mut grad_k = KernelBank::zeros(kernels.out_channels, kernels.in_channels, k);
    let per_out = grad_k.per_output();
    run_rows(&mut grad_k.data, per_out, work, |o, bank| {
        let g = &grad_out.data[o * out_shape.plane()..(o + 1) * out_shape.plane()];
        for c in 0..in_shape.channels {
            let src = &input.data[c * in_shape.plane()..(c + 1) * in_shape.plane()];
            for dy in 0..k {
                for dx in 0..k {
                    let mut acc = 0.0;
                    for y in 0..oh {
                        let src_row = &src[(y + dy) * in_shape.width + dx..][..ow];
                        acc += dot(&g[y * ow..(y + 1) * ow], src_row);
                    }
                    bank[(c * k + dy) * k + dx] += acc;
                }
            }
        }
    });
    Ok((grad_in, grad_k))
}

fn run_rows<F>(data: &mut [f64], row_len: usize, work: usize, f: F)
where
    F: Fn(usize, &mut [f64]) + Sync + Send,
{
    if row_len == 0 {
        return;
    }
    if work >= PAR_THRESHOLD {
        par::for_each_row_mut(data, row_len, f);
    } else {
        for (i, row) in data.chunks_mut(row_len).enumerate() {
            f(i, row);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn m(rows: &[&[f64]]) -> DenseMatrix {
        DenseMatrix::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
    }

    fn random(rng: &mut ChaCha8Rng, r: usize, c: usize) -> DenseMatrix {
        DenseMatrix::from_vec(r, c, (0..r * c).map(|_| rng.random_range(-1.0..1.0)).collect())
            .unwrap()
    }

    #[test]
    fn matmul_identity() {
        let id = m(&[&[1., 0.], &[0., 1.]]);
        let b = m(&[&[3., 4.], &[5., 6.]]);
        assert_eq!(matmul(&id, &b).unwrap(), b);
    }

    #[test]
    fn matmul_row_by_column() {
        let out = matmul(&m(&[&[1., 2.]]), &m(&[&[3.], &[4.]])).unwrap();
        assert_eq!(out.data(), &[11.0]);
    }

    #[test]
    fn matmul_empty_and_mismatch() {
        let a = DenseMatrix::zeros(0, 3);
        let b = DenseMatrix::zeros(3, 4);
        let out = matmul(&a, &b).unwrap();
        assert_eq!((out.rows(), out.cols()), (0, 4));
        assert!(matches!(matmul(&b, &b), Err(Error::Shape(_))));
    }

    #[test]
    fn matmul_matches_affine_bitwise() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = random(&mut rng, 7, 40);
        let w = random(&mut rng, 30, 40);
        let bias = vec![0.0; 30];
        let prod = matmul(&x, &w.transpose()).unwrap();
        for i in 0..7 {
            let y = affine(&w, &bias, x.row(i)).unwrap();
            assert_eq!(prod.row(i), &y[..]);
        }
    }

    #[test]
    fn large_matmul_is_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let a = random(&mut rng, 64, 128);
        let b = random(&mut rng, 128, 64);
        let first = matmul(&a, &b).unwrap();
        for _ in 0..3 {
            assert_eq!(matmul(&a, &b).unwrap(), first);
        }
    }

    #[test]
    fn sigmoid_values() {
        assert_eq!(sigmoid(0.0), 0.5);
        // 0.88079707797788244405972914130239... (40-digit evaluation)
        assert!((sigmoid(2.0) - 0.880_797_077_977_882_4).abs() < 1e-15);
        assert!(sigmoid(800.0) == 1.0 && sigmoid(-800.0) >= 0.0);
        assert!(sigmoid(-700.0) > 0.0);
    }

    #[test]
    fn relu_cases() {
        assert_eq!(relu(&m(&[&[-1., 0., 2.]])).data(), &[0., 0., 2.]);
        assert_eq!(relu(&m(&[&[-1., -3.]])).data(), &[0., 0.]);
        let pos = m(&[&[0.5, 3.0]]);
        assert_eq!(relu(&pos), pos);
    }

    #[test]
    fn conv_identity_kernel() {
        let grid = FeatureGrid::new(
            GridShape::new(1, 3, 3),
            (1..=9).map(f64::from).collect(),
        )
        .unwrap();
        let mut k = KernelBank::zeros(1, 1, 1);
        k.data[0] = 1.0;
        assert_eq!(conv2d_valid(&grid, &k, 1).unwrap(), grid);
    }

    #[test]
    fn conv_all_ones() {
        let grid = FeatureGrid::new(GridShape::new(1, 2, 2), vec![1.0; 4]).unwrap();
        let mut k = KernelBank::zeros(1, 1, 2);
        k.data.fill(1.0);
        let out = conv2d_valid(&grid, &k, 2).unwrap();
        assert_eq!(out.shape(), GridShape::new(1, 1, 1));
        assert_eq!(out.data(), &[4.0]);
    }

    #[test]
    fn conv_shapes() {
        let shape = GridShape::new(256, 13, 20);
        assert_eq!(shape.after_conv(3, 64).unwrap(), GridShape::new(64, 11, 18));
        let grid = FeatureGrid::zeros(GridShape::new(1, 2, 5));
        let k = KernelBank::zeros(1, 1, 3);
        assert!(matches!(conv2d_valid(&grid, &k, 3), Err(Error::Shape(_))));
    }

    #[test]
    fn conv_delta_kernel_is_shifted_crop() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let shape = GridShape::new(2, 6, 7);
        let grid =
            FeatureGrid::new(shape, (0..shape.len()).map(|_| rng.random_range(-2.0..2.0)).collect())
                .unwrap();
        // one output channel picking channel 1 at offset (dy, dx) = (2, 1)
        let mut k = KernelBank::zeros(1, 2, 3);
        let idx = k.idx(0, 1, 2, 1);
        k.data[idx] = 1.0;
        let out = conv2d_valid(&grid, &k, 3).unwrap();
        for y in 0..4 {
            for x in 0..5 {
                assert_eq!(out.at(0, y, x), grid.at(1, y + 2, x + 1));
            }
        }
    }

    #[test]
    fn conv_backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let shape = GridShape::new(3, 5, 6);
        let grid =
            FeatureGrid::new(shape, (0..shape.len()).map(|_| rng.random_range(-1.0..1.0)).collect())
                .unwrap();
        let mut bank = KernelBank::zeros(2, 3, 2);
        bank.data.iter_mut().for_each(|v| *v = rng.random_range(-1.0..1.0));
        let out_shape = shape.after_conv(2, 2).unwrap();
        let probe: Vec<f64> = (0..out_shape.len()).map(|_| rng.random_range(-1.0..1.0)).collect();
        let objective = |g: &FeatureGrid, b: &KernelBank| dot(conv2d_valid(g, b, 2).unwrap().data(), &probe);
        let (gi, gk) =
            conv2d_valid_backward(&grid, &bank, &FeatureGrid::new(out_shape, probe.clone()).unwrap())
                .unwrap();
        let h = 1e-6;
        for i in 0..bank.data.len() {
            let (mut p, mut q) = (bank.clone(), bank.clone());
            p.data[i] += h;
            q.data[i] -= h;
            let fd = (objective(&grid, &p) - objective(&grid, &q)) / (2.0 * h);
            assert!((fd - gk.data[i]).abs() < 1e-8);
        }
        for i in 0..shape.len() {
            let mut p = grid.data.clone();
            let mut q = grid.data.clone();
            p[i] += h;
            q[i] -= h;
            let fd = (objective(&FeatureGrid::new(shape, p).unwrap(), &bank)
                - objective(&FeatureGrid::new(shape, q).unwrap(), &bank))
                / (2.0 * h);
            assert!((fd - gi.data()[i]).abs() < 1e-8);
        }
    }

    proptest! {
        #[test]
        fn sigmoid_symmetry(exp in -6.0f64..2.845, neg in any::<bool>()) {
            // log-uniform magnitude in [1e-6, 7e2]
            let x = 10f64.powf(exp) * if neg { -1.0 } else { 1.0 };
            let s = sigmoid(x) + sigmoid(-x);
            prop_assert!((s - 1.0).abs() <= 1e-15);
            let p = sigmoid(x);
            prop_assert!((0.0..=1.0).contains(&p));
        }

        #[test]
        fn matmul_associative(seed in any::<u64>(), a in 1usize..6, b in 1usize..6, c in 1usize..6, d in 1usize..6) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let x = random(&mut rng, a, b);
            let y = random(&mut rng, b, c);
            let z = random(&mut rng, c, d);
            let left = matmul(&matmul(&x, &y).unwrap(), &z).unwrap();
            let right = matmul(&x, &matmul(&y, &z).unwrap()).unwrap();
            let scale = left.data().iter().fold(1.0f64, |s, v| s.max(v.abs()));
            for (l, r) in left.data().iter().zip(right.data()) {
                prop_assert!((l - r).abs() <= 1e-9 * scale);
            }
        }
    }
}
