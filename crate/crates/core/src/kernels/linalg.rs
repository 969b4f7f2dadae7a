use crate::tensor::Element;

/// A row-major matrix seen through an optional transpose, as strides.
#[derive(Debug, Clone, Copy)]
pub struct MatView {
    pub rows: usize,
    pub cols: usize,
    pub rs: isize,
    pub cs: isize,
}

impl MatView {
    /// View of a stored `stored_rows × stored_cols` row-major matrix,
    /// transposed when `t` is set.
    pub fn new(stored_rows: usize, stored_cols: usize, t: bool) -> Self {
        if t {
            MatView {
                rows: stored_cols,
                cols: stored_rows,
                rs: 1,
                cs: stored_cols as isize,
            }
        } else {
            MatView {
                rows: stored_rows,
                cols: stored_cols,
                rs: stored_cols as isize,
                cs: 1,
            }
        }
    }

    fn t(self) -> Self {
        MatView {
            rows: self.cols,
            cols: self.rows,
            rs: self.cs,
            cs: self.rs,
        }
    }
}

/// Batched matrix product `C[b] = op(A[b]) · op(B[b or 0])`.
#[derive(Debug, Clone, Copy)]
pub struct BmmGeom {
    pub batch: usize,
    /// `B` has a single matrix shared across the batch.
    pub b_shared: bool,
    pub a: MatView,
    pub b: MatView,
}

impl BmmGeom {
    pub fn m(&self) -> usize {
        self.a.rows
    }
    pub fn k(&self) -> usize {
        self.a.cols
    }
    pub fn n(&self) -> usize {
        self.b.cols
    }
    fn a_len(&self) -> usize {
        self.a.rows * self.a.cols
    }
    fn b_len(&self) -> usize {
        self.b.rows * self.b.cols
    }
    fn b_off(&self, i: usize) -> usize {
        if self.b_shared {
            0
        } else {
            i * self.b_len()
        }
    }
}

pub fn bmm_forward<T: Element>(g: &BmmGeom, a: &[T], b: &[T]) -> Vec<T> {
    let (m, k, n) = (g.m(), g.k(), g.n());
    let mut c = vec![T::zero(); g.batch * m * n];
    for i in 0..g.batch {
        T::gemm(
            m,
            k,
            n,
            T::one(),
            &a[i * g.a_len()..],
            g.a.rs,
            g.a.cs,
            &b[g.b_off(i)..],
            g.b.rs,
            g.b.cs,
            T::zero(),
            &mut c[i * m * n..],
            n as isize,
            1,
        );
    }
    c
}

pub fn bmm_backward<T: Element>(
    g: &BmmGeom,
    a: &[T],
    b: &[T],
    dc: &[T],
    need_da: bool,
    need_db: bool,
) -> (Option<Vec<T>>, Option<Vec<T>>) {
    let (m, k, n) = (g.m(), g.k(), g.n());
    let dcv = MatView::new(m, n, false);
    let da = need_da.then(|| {
        let mut da = vec![T::zero(); g.batch * g.a_len()];
        let bt = g.b.t();
        for i in 0..g.batch {
            // d op(A) = dC · op(B)ᵀ, written through op(A)'s strides.
            T::gemm(
                m,
                n,
                k,
                T::one(),
                &dc[i * m * n..],
                dcv.rs,
                dcv.cs,
                &b[g.b_off(i)..],
                bt.rs,
                bt.cs,
                T::zero(),
                &mut da[i * g.a_len()..],
                g.a.rs,
                g.a.cs,
            );
        }
        da
    });
    let db = need_db.then(|| {
        let len = if g.b_shared {
            g.b_len()
        } else {
            g.batch * g.b_len()
        };
        let mut db = vec![T::zero(); len];
        let at = g.a.t();
        for i in 0..g.batch {
            let beta = if g.b_shared && i > 0 { T::one() } else { T::zero() };
            T::gemm(
                k,
                m,
                n,
                T::one(),
                &a[i * g.a_len()..],
                at.rs,
                at.cs,
                &dc[i * m * n..],
                dcv.rs,
                dcv.cs,
                beta,
                &mut db[g.b_off(i)..],
                g.b.rs,
                g.b.cs,
            );
        }
        db
    });
    (da, db)
}
