//! The primitive op set. Each op validates shapes, computes the forward
//! value, and registers a backward closure that scatters the upstream
//! gradient into whichever parents are tracked.

use std::sync::Arc;

use super::{Tape, Tensor, TensorError};

/// Coefficients of the tanh GELU approximation.
const GELU_C0: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_C1: f64 = 0.044_715;
/// Variance floor inside layer normalization.
const LAYER_NORM_EPS: f64 = 1e-12;
/// Norms below this are treated as zero vectors by cosine similarity.
const COSINE_DEAD_NORM: f64 = 1e-15;

fn mismatch(op: &'static str, detail: String) -> TensorError {
    TensorError::ShapeMismatch { op, detail }
}

impl Tape {
    // ---- elementwise ----

    pub fn add(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor, TensorError> {
        self.zip_elementwise("add", a, b, |x, y| x + y, |_, _| (1.0, 1.0))
    }

    pub fn sub(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor, TensorError> {
        self.zip_elementwise("sub", a, b, |x, y| x - y, |_, _| (1.0, -1.0))
    }

    pub fn mul(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor, TensorError> {
        self.zip_elementwise("mul", a, b, |x, y| x * y, |x, y| (y, x))
    }

    fn zip_elementwise(
        &mut self,
        op: &'static str,
        a: &Tensor,
        b: &Tensor,
        forward: impl Fn(f64, f64) -> f64,
        local: impl Fn(f64, f64) -> (f64, f64) + 'static,
    ) -> Result<Tensor, TensorError> {
        let pa = self.tracked(a)?;
        let pb = self.tracked(b)?;
        if a.shape != b.shape {
            return Err(mismatch(op, format!("{:?} vs {:?}", a.shape, b.shape)));
        }
        let out: Vec<f64> = a.data.iter().zip(b.data.iter()).map(|(&x, &y)| forward(x, y)).collect();
        let (a_data, b_data) = (Arc::clone(&a.data), Arc::clone(&b.data));
        let len = a.len();
        self.emit(
            op,
            a.shape.clone(),
            out,
            Box::new(move |g, store| {
                if let Some(p) = pa {
                    let da = store.accumulate(p, len);
                    for i in 0..len {
                        da[i] += g[i] * local(a_data[i], b_data[i]).0;
                    }
                }
                if let Some(p) = pb {
                    let db = store.accumulate(p, len);
                    for i in 0..len {
                        db[i] += g[i] * local(a_data[i], b_data[i]).1;
                    }
                }
            }),
        )
    }

    pub fn scale(&mut self, a: &Tensor, c: f64) -> Result<Tensor, TensorError> {
        let pa = self.tracked(a)?;
        let out: Vec<f64> = a.data.iter().map(|&x| c * x).collect();
        let len = a.len();
        self.emit(
            "scale",
            a.shape.clone(),
            out,
            Box::new(move |g, store| {
                if let Some(p) = pa {
                    let da = store.accumulate(p, len);
                    for i in 0..len {
                        da[i] += c * g[i];
                    }
                }
            }),
        )
    }

    pub fn exp(&mut self, a: &Tensor) -> Result<Tensor, TensorError> {
        let pa = self.tracked(a)?;
        let out: Vec<f64> = a.data.iter().map(|&x| x.exp()).collect();
        let y = Arc::new(out.clone());
        let len = a.len();
        self.emit(
            "exp",
            a.shape.clone(),
            out,
            Box::new(move |g, store| {
                if let Some(p) = pa {
                    let da = store.accumulate(p, len);
                    for i in 0..len {
                        da[i] += g[i] * y[i];
                    }
                }
            }),
        )
    }

    pub fn log(&mut self, a: &Tensor) -> Result<Tensor, TensorError> {
        let pa = self.tracked(a)?;
        let out: Vec<f64> = a.data.iter().map(|&x| x.ln()).collect();
        let x = Arc::clone(&a.data);
        let len = a.len();
        self.emit(
            "log",
            a.shape.clone(),
            out,
            Box::new(move |g, store| {
                if let Some(p) = pa {
                    let da = store.accumulate(p, len);
                    for i in 0..len {
                        da[i] += g[i] / x[i];
                    }
                }
            }),
        )
    }

    pub fn gelu(&mut self, a: &Tensor) -> Result<Tensor, TensorError> {
        let pa = self.tracked(a)?;
        let out: Vec<f64> = a.data.iter().map(|&x| gelu_forward(x)).collect();
        let x = Arc::clone(&a.data);
        let len = a.len();
        let fault_gain = self.backward_fault_gain;
        self.emit(
            "gelu",
            a.shape.clone(),
            out,
            Box::new(move |g, store| {
                if let Some(p) = pa {
                    let da = store.accumulate(p, len);
                    for i in 0..len {
                        da[i] += fault_gain * g[i] * gelu_derivative(x[i]);
                    }
                }
            }),
        )
    }

    // ---- linear algebra ----

    pub fn matmul(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor, TensorError> {
        let pa = self.tracked(a)?;
        let pb = self.tracked(b)?;
        let (m, k) = a.rank2("matmul")?;
        let (k2, n) = b.rank2("matmul")?;
        if k != k2 {
            return Err(mismatch("matmul", format!("inner dims {k} vs {k2}")));
        }
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for q in 0..k {
                let aiq = a.data[i * k + q];
                if aiq != 0.0 {
                    let row = &b.data[q * n..(q + 1) * n];
                    let dst = &mut out[i * n..(i + 1) * n];
                    for j in 0..n {
                        dst[j] += aiq * row[j];
                    }
                }
            }
        }
        let (a_data, b_data) = (Arc::clone(&a.data), Arc::clone(&b.data));
        self.emit(
            "matmul",
            vec![m, n],
            out,
            Box::new(move |g, store| {
                if let Some(p) = pa {
                    let da = store.accumulate(p, m * k);
                    for i in 0..m {
                        for q in 0..k {
                            let mut acc = 0.0;
                            for j in 0..n {
                                acc += g[i * n + j] * b_data[q * n + j];
                            }
                            da[i * k + q] += acc;
                        }
                    }
                }
                if let Some(p) = pb {
                    let db = store.accumulate(p, k * n);
                    for i in 0..m {
                        for q in 0..k {
                            let aiq = a_data[i * k + q];
                            if aiq != 0.0 {
                                for j in 0..n {
                                    db[q * n + j] += aiq * g[i * n + j];
                                }
                            }
                        }
                    }
                }
            }),
        )
    }

    pub fn transpose(&mut self, a: &Tensor) -> Result<Tensor, TensorError> {
        let pa = self.tracked(a)?;
        let (m, n) = a.rank2("transpose")?;
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = a.data[i * n + j];
            }
        }
        self.emit(
            "transpose",
            vec![n, m],
            out,
            Box::new(move |g, store| {
                if let Some(p) = pa {
                    let da = store.accumulate(p, m * n);
                    for i in 0..m {
                        for j in 0..n {
                            da[i * n + j] += g[j * m + i];
                        }
                    }
                }
            }),
        )
    }

    /// Multiplies every row of `a` elementwise by the vector `v` (per-column
    /// gains, e.g. a normalization's affine weight).
    pub fn mul_row_vec(&mut self, a: &Tensor, v: &Tensor) -> Result<Tensor, TensorError> {
        let pa = self.tracked(a)?;
        let pv = self.tracked(v)?;
        let (m, n) = a.rank2("mul_row_vec")?;
        if v.rank1("mul_row_vec")? != n {
            return Err(mismatch("mul_row_vec", format!("cols {n} vs vec {:?}", v.shape)));
        }
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[i * n + j] = a.data[i * n + j] * v.data[j];
            }
        }
        let (a_data, v_data) = (Arc::clone(&a.data), Arc::clone(&v.data));
        self.emit(
            "mul_row_vec",
            vec![m, n],
            out,
            Box::new(move |g, store| {
                if let Some(p) = pa {
                    let da = store.accumulate(p, m * n);
                    for i in 0..m {
                        for j in 0..n {
                            da[i * n + j] += g[i * n + j] * v_data[j];
                        }
                    }
                }
                if let Some(p) = pv {
                    let dv = store.accumulate(p, n);
                    for i in 0..m {
                        for j in 0..n {
                            dv[j] += g[i * n + j] * a_data[i * n + j];
                        }
                    }
                }
            }),
        )
    }

    /// Adds the vector `v` to every row of `a` (per-column bias).
    pub fn add_row_vec(&mut self, a: &Tensor, v: &Tensor) -> Result<Tensor, TensorError> {
        let pa = self.tracked(a)?;
        let pv = self.tracked(v)?;
        let (m, n) = a.rank2("add_row_vec")?;
        if v.rank1("add_row_vec")? != n {
            return Err(mismatch("add_row_vec", format!("cols {n} vs vec {:?}", v.shape)));
        }
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[i * n + j] = a.data[i * n + j] + v.data[j];
            }
        }
        self.emit(
            "add_row_vec",
            vec![m, n],
            out,
            Box::new(move |g, store| {
                if let Some(p) = pa {
                    let da = store.accumulate(p, m * n);
                    for (d, &u) in da.iter_mut().zip(g.iter()) {
                        *d += u;
                    }
                }
                if let Some(p) = pv {
                    let dv = store.accumulate(p, n);
                    for i in 0..m {
                        for j in 0..n {
                            dv[j] += g[i * n + j];
                        }
                    }
                }
            }),
        )
    }

    /// Divides row i of `a` by `s[i]`. Divisors must be bounded away from
    /// zero; callers mask out empty rows before normalizing by their sums.
    pub fn div_rows_by_col(&mut self, a: &Tensor, s: &Tensor) -> Result<Tensor, TensorError> {
        let pa = self.tracked(a)?;
        let ps = self.tracked(s)?;
        let (m, n) = a.rank2("div_rows_by_col")?;
        if s.rank1("div_rows_by_col")? != m {
            return Err(mismatch("div_rows_by_col", format!("rows {m} vs vec {:?}", s.shape)));
        }
        if let Some(row) = s.data.iter().position(|x| x.abs() < 1e-300) {
            return Err(TensorError::Numeric {
                op: "div_rows_by_col",
                detail: format!("zero divisor at row {row}"),
            });
        }
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[i * n + j] = a.data[i * n + j] / s.data[i];
            }
        }
        let y = Arc::new(out.clone());
        let s_data = Arc::clone(&s.data);
        self.emit(
            "div_rows_by_col",
            vec![m, n],
            out,
            Box::new(move |g, store| {
                if let Some(p) = pa {
                    let da = store.accumulate(p, m * n);
                    for i in 0..m {
                        for j in 0..n {
                            da[i * n + j] += g[i * n + j] / s_data[i];
                        }
                    }
                }
                if let Some(p) = ps {
                    let ds = store.accumulate(p, m);
                    for i in 0..m {
                        let mut acc = 0.0;
                        for j in 0..n {
                            acc += g[i * n + j] * y[i * n + j];
                        }
                        ds[i] -= acc / s_data[i];
                    }
                }
            }),
        )
    }

    // ---- reductions ----

    pub fn sum_all(&mut self, a: &Tensor) -> Result<Tensor, TensorError> {
        let pa = self.tracked(a)?;
        let total: f64 = a.data.iter().sum();
        let len = a.len();
        self.emit(
            "sum_all",
            vec![1],
            vec![total],
            Box::new(move |g, store| {
                if let Some(p) = pa {
                    let da = store.accumulate(p, len);
                    for d in da.iter_mut() {
                        *d += g[0];
                    }
                }
            }),
        )
    }

    pub fn mean_all(&mut self, a: &Tensor) -> Result<Tensor, TensorError> {
        let pa = self.tracked(a)?;
        let len = a.len();
        if len == 0 {
            return Err(mismatch("mean_all", "empty tensor".to_owned()));
        }
        let total: f64 = a.data.iter().sum();
        self.emit(
            "mean_all",
            vec![1],
            vec![total / len as f64],
            Box::new(move |g, store| {
                if let Some(p) = pa {
                    let da = store.accumulate(p, len);
                    let w = g[0] / len as f64;
                    for d in da.iter_mut() {
                        *d += w;
                    }
                }
            }),
        )
    }

    /// Per-row sums of a matrix: `[m, n] → [m]`.
    pub fn row_sums(&mut self, a: &Tensor) -> Result<Tensor, TensorError> {
        let pa = self.tracked(a)?;
        let (m, n) = a.rank2("row_sums")?;
        let out: Vec<f64> = (0..m).map(|i| a.data[i * n..(i + 1) * n].iter().sum()).collect();
        self.emit(
            "row_sums",
            vec![m],
            out,
            Box::new(move |g, store| {
                if let Some(p) = pa {
                    let da = store.accumulate(p, m * n);
                    for i in 0..m {
                        for j in 0..n {
                            da[i * n + j] += g[i];
                        }
                    }
                }
            }),
        )
    }

    /// Column-wise average over the rows of a matrix: `[m, n] → [n]` (the
    /// mean row, e.g. mean pooling over sequence positions).
    pub fn mean_of_rows(&mut self, a: &Tensor) -> Result<Tensor, TensorError> {
        let pa = self.tracked(a)?;
        let (m, n) = a.rank2("mean_of_rows")?;
        if m == 0 {
            return Err(mismatch("mean_of_rows", "no rows".to_owned()));
        }
        let mut out = vec![0.0; n];
        for row in a.data.chunks(n) {
            for (acc, &x) in out.iter_mut().zip(row) {
                *acc += x;
            }
        }
        for v in out.iter_mut() {
            *v /= m as f64;
        }
        self.emit(
            "mean_of_rows",
            vec![n],
            out,
            Box::new(move |g, store| {
                if let Some(p) = pa {
                    let da = store.accumulate(p, m * n);
                    for i in 0..m {
                        for j in 0..n {
                            da[i * n + j] += g[j] / m as f64;
                        }
                    }
                }
            }),
        )
    }

    // ---- structure ----

    pub fn reshape(&mut self, a: &Tensor, shape: Vec<usize>) -> Result<Tensor, TensorError> {
        let pa = self.tracked(a)?;
        if shape.iter().product::<usize>() != a.len() {
            return Err(mismatch("reshape", format!("{:?} to {shape:?}", a.shape)));
        }
        let len = a.len();
        self.emit(
            "reshape",
            shape,
            a.data.to_vec(),
            Box::new(move |g, store| {
                if let Some(p) = pa {
                    let da = store.accumulate(p, len);
                    for (d, &u) in da.iter_mut().zip(g.iter()) {
                        *d += u;
                    }
                }
            }),
        )
    }

    /// Rows `start..end` of a matrix.
    pub fn slice_rows(&mut self, a: &Tensor, start: usize, end: usize) -> Result<Tensor, TensorError> {
        let pa = self.tracked(a)?;
        let (m, n) = a.rank2("slice_rows")?;
        if start > end || end > m {
            return Err(mismatch("slice_rows", format!("{start}..{end} of {m} rows")));
        }
        let out = a.data[start * n..end * n].to_vec();
        self.emit(
            "slice_rows",
            vec![end - start, n],
            out,
            Box::new(move |g, store| {
                if let Some(p) = pa {
                    let da = store.accumulate(p, m * n);
                    for (d, &u) in da[start * n..end * n].iter_mut().zip(g.iter()) {
                        *d += u;
                    }
                }
            }),
        )
    }

    /// Columns `start..end` of a matrix.
    pub fn slice_cols(&mut self, a: &Tensor, start: usize, end: usize) -> Result<Tensor, TensorError> {
        let pa = self.tracked(a)?;
        let (m, n) = a.rank2("slice_cols")?;
        if start > end || end > n {
            return Err(mismatch("slice_cols", format!("{start}..{end} of {n} cols")));
        }
        let w = end - start;
        let mut out = vec![0.0; m * w];
        for i in 0..m {
            out[i * w..(i + 1) * w].copy_from_slice(&a.data[i * n + start..i * n + end]);
        }
        self.emit(
            "slice_cols",
            vec![m, w],
            out,
            Box::new(move |g, store| {
                if let Some(p) = pa {
                    let da = store.accumulate(p, m * n);
                    for i in 0..m {
                        for j in 0..w {
                            da[i * n + start + j] += g[i * w + j];
                        }
                    }
                }
            }),
        )
    }

    /// Concatenates matrices with equal row counts along columns.
    pub fn concat_cols(&mut self, parts: &[&Tensor]) -> Result<Tensor, TensorError> {
        if parts.is_empty() {
            return Err(mismatch("concat_cols", "no inputs".to_owned()));
        }
        let mut parents = Vec::with_capacity(parts.len());
        let mut widths = Vec::with_capacity(parts.len());
        let (m, _) = parts[0].rank2("concat_cols")?;
        for part in parts {
            let (mi, ni) = part.rank2("concat_cols")?;
            if mi != m {
                return Err(mismatch("concat_cols", format!("row counts {m} vs {mi}")));
            }
            parents.push(self.tracked(part)?);
            widths.push(ni);
        }
        let n: usize = widths.iter().sum();
        let mut out = vec![0.0; m * n];
        let mut offset = 0;
        for (part, &w) in parts.iter().zip(widths.iter()) {
            for i in 0..m {
                out[i * n + offset..i * n + offset + w]
                    .copy_from_slice(&part.data[i * w..(i + 1) * w]);
            }
            offset += w;
        }
        self.emit(
            "concat_cols",
            vec![m, n],
            out,
            Box::new(move |g, store| {
                let mut offset = 0;
                for (&parent, &w) in parents.iter().zip(widths.iter()) {
                    if let Some(p) = parent {
                        let da = store.accumulate(p, m * w);
                        for i in 0..m {
                            for j in 0..w {
                                da[i * w + j] += g[i * n + offset + j];
                            }
                        }
                    }
                    offset += w;
                }
            }),
        )
    }

    /// Stacks equal-length vectors into a matrix, one per row.
    pub fn stack_rows(&mut self, rows: &[&Tensor]) -> Result<Tensor, TensorError> {
        if rows.is_empty() {
            return Err(mismatch("stack_rows", "no inputs".to_owned()));
        }
        let n = rows[0].rank1("stack_rows")?;
        let mut parents = Vec::with_capacity(rows.len());
        for row in rows {
            if row.rank1("stack_rows")? != n {
                return Err(mismatch("stack_rows", "unequal row lengths".to_owned()));
            }
            parents.push(self.tracked(row)?);
        }
        let m = rows.len();
        let mut out = Vec::with_capacity(m * n);
        for row in rows {
            out.extend_from_slice(&row.data);
        }
        self.emit(
            "stack_rows",
            vec![m, n],
            out,
            Box::new(move |g, store| {
                for (i, &parent) in parents.iter().enumerate() {
                    if let Some(p) = parent {
                        let da = store.accumulate(p, n);
                        for (d, &u) in da.iter_mut().zip(g[i * n..(i + 1) * n].iter()) {
                            *d += u;
                        }
                    }
                }
            }),
        )
    }

    /// Copies rows of `a` selected by `ids` (with repetition allowed);
    /// backward scatter-adds into the selected rows.
    pub fn gather_rows(&mut self, a: &Tensor, ids: &[usize]) -> Result<Tensor, TensorError> {
        self.gather_impl("gather_rows", a, ids)
    }

    /// Embedding-table lookup: `gather_rows` on a `[vocab, d]` table.
    pub fn embedding_lookup(&mut self, table: &Tensor, ids: &[usize]) -> Result<Tensor, TensorError> {
        self.gather_impl("embedding_lookup", table, ids)
    }

    fn gather_impl(
        &mut self,
        op: &'static str,
        a: &Tensor,
        ids: &[usize],
    ) -> Result<Tensor, TensorError> {
        let pa = self.tracked(a)?;
        let (m, n) = a.rank2(op)?;
        if let Some(&bad) = ids.iter().find(|&&id| id >= m) {
            return Err(mismatch(op, format!("row id {bad} out of {m}")));
        }
        let mut out = Vec::with_capacity(ids.len() * n);
        for &id in ids {
            out.extend_from_slice(&a.data[id * n..(id + 1) * n]);
        }
        let ids: Vec<usize> = ids.to_vec();
        self.emit(
            op,
            vec![ids.len(), n],
            out,
            Box::new(move |g, store| {
                if let Some(p) = pa {
                    let da = store.accumulate(p, m * n);
                    for (k, &id) in ids.iter().enumerate() {
                        for j in 0..n {
                            da[id * n + j] += g[k * n + j];
                        }
                    }
                }
            }),
        )
    }

    // ---- normalization and activations over rows ----

    /// Row-wise standardization to zero mean and unit variance (population
    /// variance, floor 1e-12). Purely normalizing — affine parameters are
    /// applied by callers via `mul_row_vec`/`add_row_vec`.
    pub fn layer_norm(&mut self, a: &Tensor) -> Result<Tensor, TensorError> {
        let pa = self.tracked(a)?;
        let (m, n) = a.rank2("layer_norm")?;
        let mut out = vec![0.0; m * n];
        let mut inv_std = vec![0.0; m];
        for i in 0..m {
            let row = &a.data[i * n..(i + 1) * n];
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|&x| (x - mean) * (x - mean)).sum::<f64>() / n as f64;
            let inv = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            inv_std[i] = inv;
            for j in 0..n {
                out[i * n + j] = (row[j] - mean) * inv;
            }
        }
        let y = Arc::new(out.clone());
        let inv_std = Arc::new(inv_std);
        self.emit(
            "layer_norm",
            vec![m, n],
            out,
            Box::new(move |g, store| {
                if let Some(p) = pa {
                    let da = store.accumulate(p, m * n);
                    for i in 0..m {
                        let gi = &g[i * n..(i + 1) * n];
                        let yi = &y[i * n..(i + 1) * n];
                        let g_mean = gi.iter().sum::<f64>() / n as f64;
                        let gy_mean =
                            gi.iter().zip(yi.iter()).map(|(&u, &v)| u * v).sum::<f64>() / n as f64;
                        for j in 0..n {
                            da[i * n + j] += inv_std[i] * (gi[j] - g_mean - yi[j] * gy_mean);
                        }
                    }
                }
            }),
        )
    }

    /// Row-wise softmax with max-shift for stability.
    pub fn softmax_rows(&mut self, a: &Tensor) -> Result<Tensor, TensorError> {
        let pa = self.tracked(a)?;
        let (m, n) = a.rank2("softmax_rows")?;
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            softmax_into(&a.data[i * n..(i + 1) * n], &mut out[i * n..(i + 1) * n]);
        }
        let y = Arc::new(out.clone());
        self.emit(
            "softmax_rows",
            vec![m, n],
            out,
            Box::new(move |g, store| {
                if let Some(p) = pa {
                    let da = store.accumulate(p, m * n);
                    for i in 0..m {
                        let gi = &g[i * n..(i + 1) * n];
                        let yi = &y[i * n..(i + 1) * n];
                        let dot: f64 = gi.iter().zip(yi.iter()).map(|(&u, &v)| u * v).sum();
                        for j in 0..n {
                            da[i * n + j] += yi[j] * (gi[j] - dot);
                        }
                    }
                }
            }),
        )
    }

    /// Per-row softmax cross-entropy against integer targets: `[m, n]` logits
    /// and `m` class indices produce `m` losses (callers average as needed).
    pub fn cross_entropy_rows(
        &mut self,
        logits: &Tensor,
        targets: &[usize],
    ) -> Result<Tensor, TensorError> {
        let pa = self.tracked(logits)?;
        let (m, n) = logits.rank2("cross_entropy_rows")?;
        if targets.len() != m {
            return Err(mismatch(
                "cross_entropy_rows",
                format!("{m} rows vs {} targets", targets.len()),
            ));
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= n) {
            return Err(mismatch("cross_entropy_rows", format!("target {bad} out of {n}")));
        }
        let mut probs = vec![0.0; m * n];
        let mut out = vec![0.0; m];
        for i in 0..m {
            let row = &logits.data[i * n..(i + 1) * n];
            let p = &mut probs[i * n..(i + 1) * n];
            let log_z = softmax_into(row, p);
            out[i] = log_z - row[targets[i]];
        }
        let probs = Arc::new(probs);
        let targets: Vec<usize> = targets.to_vec();
        self.emit(
            "cross_entropy_rows",
            vec![m],
            out,
            Box::new(move |g, store| {
                if let Some(p) = pa {
                    let da = store.accumulate(p, m * n);
                    for i in 0..m {
                        for j in 0..n {
                            let indicator = if j == targets[i] { 1.0 } else { 0.0 };
                            da[i * n + j] += g[i] * (probs[i * n + j] - indicator);
                        }
                    }
                }
            }),
        )
    }

    /// All-pairs cosine similarity between the rows of `a` (`[m, d]`) and
    /// the rows of `b` (`[n, d]`), giving `[m, n]`. Rows with norm below
    /// 1e-15 are treated as dead: similarity 0, no gradient.
    pub fn cosine_similarity_rows(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor, TensorError> {
        let pa = self.tracked(a)?;
        let pb = self.tracked(b)?;
        let (m, d) = a.rank2("cosine_similarity_rows")?;
        let (n, d2) = b.rank2("cosine_similarity_rows")?;
        if d != d2 {
            return Err(mismatch("cosine_similarity_rows", format!("dims {d} vs {d2}")));
        }
        let norm = |data: &[f64], i: usize| -> f64 {
            data[i * d..(i + 1) * d].iter().map(|&x| x * x).sum::<f64>().sqrt()
        };
        let a_norms: Vec<f64> = (0..m).map(|i| norm(&a.data, i)).collect();
        let b_norms: Vec<f64> = (0..n).map(|j| norm(&b.data, j)).collect();
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                if a_norms[i] < COSINE_DEAD_NORM || b_norms[j] < COSINE_DEAD_NORM {
                    continue;
                }
                let dot: f64 = (0..d).map(|q| a.data[i * d + q] * b.data[j * d + q]).sum();
                out[i * n + j] = dot / (a_norms[i] * b_norms[j]);
            }
        }
        let (a_data, b_data) = (Arc::clone(&a.data), Arc::clone(&b.data));
        let (a_norms, b_norms) = (Arc::new(a_norms), Arc::new(b_norms));
        let sims = Arc::new(out.clone());
        self.emit(
            "cosine_similarity_rows",
            vec![m, n],
            out,
            Box::new(move |g, store| {
                for i in 0..m {
                    for j in 0..n {
                        let gij = g[i * n + j];
                        if gij == 0.0
                            || a_norms[i] < COSINE_DEAD_NORM
                            || b_norms[j] < COSINE_DEAD_NORM
                        {
                            continue;
                        }
                        let s = sims[i * n + j];
                        let inv = 1.0 / (a_norms[i] * b_norms[j]);
                        if let Some(p) = pa {
                            let da = store.accumulate(p, m * d);
                            for q in 0..d {
                                da[i * d + q] += gij
                                    * (b_data[j * d + q] * inv
                                        - s * a_data[i * d + q] / (a_norms[i] * a_norms[i]));
                            }
                        }
                        if let Some(p) = pb {
                            let db = store.accumulate(p, n * d);
                            for q in 0..d {
                                db[j * d + q] += gij
                                    * (a_data[i * d + q] * inv
                                        - s * b_data[j * d + q] / (b_norms[j] * b_norms[j]));
                            }
                        }
                    }
                }
            }),
        )
    }

    /// Row-wise affine map onto [0, 1]: `(x − min) / (max − min)`. A
    /// constant row (max = min) maps to all zeros and bumps the tape's
    /// degenerate-row counter; such rows pass no gradient. Ties for the
    /// extrema resolve to the first occurrence (subgradient choice).
    pub fn min_max_normalize_rows(&mut self, a: &Tensor) -> Result<Tensor, TensorError> {
        let pa = self.tracked(a)?;
        let (m, n) = a.rank2("min_max_normalize_rows")?;
        let mut out = vec![0.0; m * n];
        let mut spans = Vec::with_capacity(m);
        for i in 0..m {
            let row = &a.data[i * n..(i + 1) * n];
            let mut lo = 0;
            let mut hi = 0;
            for (j, &x) in row.iter().enumerate() {
                if x < row[lo] {
                    lo = j;
                }
                if x > row[hi] {
                    hi = j;
                }
            }
            let span = row[hi] - row[lo];
            if span == 0.0 {
                self.degenerate_rows += 1;
                spans.push(None);
                continue;
            }
            for j in 0..n {
                out[i * n + j] = (row[j] - row[lo]) / span;
            }
            spans.push(Some((lo, hi, span)));
        }
        let y = Arc::new(out.clone());
        let spans = Arc::new(spans);
        self.emit(
            "min_max_normalize_rows",
            vec![m, n],
            out,
            Box::new(move |g, store| {
                if let Some(p) = pa {
                    let da = store.accumulate(p, m * n);
                    for i in 0..m {
                        let Some((lo, hi, span)) = spans[i] else {
                            continue;
                        };
                        let gi = &g[i * n..(i + 1) * n];
                        let yi = &y[i * n..(i + 1) * n];
                        let total: f64 = gi.iter().sum();
                        let weighted: f64 =
                            gi.iter().zip(yi.iter()).map(|(&u, &v)| u * v).sum();
                        for j in 0..n {
                            da[i * n + j] += gi[j] / span;
                        }
                        da[i * n + lo] += (weighted - total) / span;
                        da[i * n + hi] -= weighted / span;
                    }
                }
            }),
        )
    }

    /// Keeps entries at or above `theta`, zeroing the rest. Gradient flows
    /// only through survivors (subgradient 0 at the cut).
    pub fn threshold_rows(&mut self, a: &Tensor, theta: f64) -> Result<Tensor, TensorError> {
        let pa = self.tracked(a)?;
        let out: Vec<f64> = a.data.iter().map(|&x| if x >= theta { x } else { 0.0 }).collect();
        self.thresholded_entries += a.data.iter().filter(|&&x| x < theta).count() as u64;
        let x = Arc::clone(&a.data);
        let len = a.len();
        self.emit(
            "threshold_rows",
            a.shape.clone(),
            out,
            Box::new(move |g, store| {
                if let Some(p) = pa {
                    let da = store.accumulate(p, len);
                    for i in 0..len {
                        if x[i] >= theta {
                            da[i] += g[i];
                        }
                    }
                }
            }),
        )
    }
}

fn gelu_forward(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C0 * (x + GELU_C1 * x * x * x)).tanh())
}

fn gelu_derivative(x: f64) -> f64 {
    let u = GELU_C0 * (x + GELU_C1 * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C0 * (1.0 + 3.0 * GELU_C1 * x * x)
}

/// Writes softmax of `row` into `out` and returns log Σ exp(row) (the
/// max-shifted log-partition, for cross-entropy).
fn softmax_into(row: &[f64], out: &mut [f64]) -> f64 {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut z = 0.0;
    for (o, &x) in out.iter_mut().zip(row.iter()) {
        *o = (x - max).exp();
        z += *o;
    }
    for o in out.iter_mut() {
        *o /= z;
    }
    max + z.ln()
}
