//! Learnable pooling: multi-head attention over point features where the
//! keys and values come from the input features and the queries are trained
//! parameters. Output length is fixed by the query count, independent of the
//! input size, and the aggregation is invariant to row permutations of the
//! input. Also houses the max-pooling baseline and an executable form of the
//! permutation-invariance argument.

use rand::Rng;

use crate::error::{Error, Result};
use crate::geometry::{apply_permutation, Permutation};
use crate::tensor::{DenseMatrix, NodeId, Parameter, Parameters, Scalar, Tape};

/// Learnable queries plus the key/value/query projections of one pooling
/// module.
///
/// Queries are `n_queries x d_model`; `w_k`/`w_v` project the input features
/// from `input_dim` to `d_model`; `w_q` maps the queries within `d_model`.
/// No biases: the pooling is a pure composition of linear maps, softmax, and
/// a weighted sum, which is what makes the permutation argument go through.
pub struct LearnablePoolingParams<S> {
    pub queries: Parameter<S>,
    pub w_q: Parameter<S>,
    pub w_k: Parameter<S>,
    pub w_v: Parameter<S>,
    heads: usize,
}

impl<S: Scalar> LearnablePoolingParams<S> {
    pub fn new<R: Rng>(
        n_queries: usize,
        input_dim: usize,
        d_model: usize,
        heads: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if n_queries == 0 {
            return Err(Error::InvalidArgument(
                "learnable pooling needs at least one query".into(),
            ));
        }
        if heads == 0 || d_model % heads != 0 {
            return Err(Error::InvalidArgument(format!(
                "d_model {d_model} must be divisible by head count {heads}"
            )));
        }
        let proj = |rows: usize, cols: usize, rng: &mut R| {
            let limit = (6.0 / (rows + cols) as f64).sqrt();
            Parameter::new(DenseMatrix::rand_uniform(rows, cols, limit, rng))
        };
        Ok(LearnablePoolingParams {
            queries: Parameter::new(DenseMatrix::randn(n_queries, d_model, 0.02, rng)),
            w_q: proj(d_model, d_model, rng),
            w_k: proj(input_dim, d_model, rng),
            w_v: proj(input_dim, d_model, rng),
            heads,
        })
    }

    pub fn n_queries(&self) -> usize {
        self.queries.rows()
    }

    pub fn d_model(&self) -> usize {
        self.queries.cols()
    }

    pub fn input_dim(&self) -> usize {
        self.w_k.rows()
    }

    pub fn heads(&self) -> usize {
        self.heads
    }

    pub fn head_dim(&self) -> usize {
        self.d_model() / self.heads
    }

    pub fn register_into(&self, params: &mut Parameters<S>, prefix: &str) {
        params.register(format!("{prefix}.queries"), &self.queries);
        params.register(format!("{prefix}.w_q"), &self.w_q);
        params.register(format!("{prefix}.w_k"), &self.w_k);
        params.register(format!("{prefix}.w_v"), &self.w_v);
    }
}

/// `softmax(q k^T / sqrt(d_k)) v`: softmax over the key axis, then a
/// weighted sum of the value rows. Output shape is `q.rows x v.cols`.
pub fn scaled_dot_product_attention<S: Scalar>(
    tape: &mut Tape<S>,
    q: NodeId,
    k: NodeId,
    v: NodeId,
    d_k: usize,
) -> Result<NodeId> {
    if tape.value(q).cols() != tape.value(k).cols() {
        return Err(Error::ShapeMismatch {
            op: "attention q/k",
            lhs: format!("{}x{}", tape.value(q).rows(), tape.value(q).cols()),
            rhs: format!("{}x{}", tape.value(k).rows(), tape.value(k).cols()),
        });
    }
    if tape.value(k).rows() != tape.value(v).rows() {
        return Err(Error::ShapeMismatch {
            op: "attention k/v",
            lhs: format!("{}x{}", tape.value(k).rows(), tape.value(k).cols()),
            rhs: format!("{}x{}", tape.value(v).rows(), tape.value(v).cols()),
        });
    }
    let kt = tape.transpose(k);
    let scores = tape.matmul(q, kt)?;
    let scaled = tape.scale(scores, S::from_f64(1.0 / (d_k as f64).sqrt()));
    let weights = tape.softmax_rows(scaled);
    tape.matmul(weights, v)
}

/// Learnable pooling forward pass, returning the pooled features and the
/// per-head attention weight nodes (each `n_queries x input_rows`).
pub fn learnable_pool_detailed<S: Scalar>(
    tape: &mut Tape<S>,
    features: NodeId,
    params: &LearnablePoolingParams<S>,
) -> Result<(NodeId, Vec<NodeId>)> {
    if tape.value(features).cols() != params.input_dim() {
        return Err(Error::ShapeMismatch {
            op: "learnable_pool",
            lhs: format!(
                "{}x{}",
                tape.value(features).rows(),
                tape.value(features).cols()
            ),
            rhs: format!("{}x{}", params.w_k.rows(), params.w_k.cols()),
        });
    }
    let q_in = tape.param(&params.queries);
    let q = tape.linear(q_in, &params.w_q, None)?;
    let k = tape.linear(features, &params.w_k, None)?;
    let v = tape.linear(features, &params.w_v, None)?;

    let d_head = params.head_dim();
    let scale = S::from_f64(1.0 / (d_head as f64).sqrt());
    let mut outputs = Vec::with_capacity(params.heads);
    let mut weight_nodes = Vec::with_capacity(params.heads);
    for h in 0..params.heads {
        let start = h * d_head;
        let q_h = tape.slice_cols(q, start, d_head)?;
        let k_h = tape.slice_cols(k, start, d_head)?;
        let v_h = tape.slice_cols(v, start, d_head)?;
        let kt = tape.transpose(k_h);
        let scores = tape.matmul(q_h, kt)?;
        let scaled = tape.scale(scores, scale);
        let weights = tape.softmax_rows(scaled);
        let head_out = tape.matmul(weights, v_h)?;
        weight_nodes.push(weights);
        outputs.push(head_out);
    }
    let pooled = tape.concat_cols(&outputs)?;
    Ok((pooled, weight_nodes))
}

/// Pool an arbitrary number of feature rows down to exactly
/// `params.n_queries()` rows of width `params.d_model()`.
pub fn learnable_pool<S: Scalar>(
    tape: &mut Tape<S>,
    features: NodeId,
    params: &LearnablePoolingParams<S>,
) -> Result<NodeId> {
    learnable_pool_detailed(tape, features, params).map(|(pooled, _)| pooled)
}

/// Value-level convenience: run the pooling on a throwaway tape.
pub fn learnable_pool_values<S: Scalar>(
    features: &DenseMatrix<S>,
    params: &LearnablePoolingParams<S>,
) -> Result<DenseMatrix<S>> {
    let mut tape = Tape::new();
    let f = tape.input(features.clone());
    let out = learnable_pool(&mut tape, f, params)?;
    Ok(tape.value(out).clone())
}

/// Column-wise max over contiguous row chunks; `out_rows = 1` is the global
/// max-pooling baseline. Exactly permutation invariant and routes gradient
/// to the (lowest-index) argmax entries only.
pub fn max_pool<S: Scalar>(tape: &mut Tape<S>, features: NodeId, out_rows: usize) -> Result<NodeId> {
    tape.max_pool_rows(features, out_rows)
}

/// Residuals of the permutation-invariance identities, evaluated with a
/// dense permutation matrix.
#[derive(Debug, Clone)]
pub struct InvarianceReport {
    /// `softmax(QWq (PFWk)^T / sqrt(dk)) PFWv` vs
    /// `softmax(QWq Wk^T F^T / sqrt(dk)) P^T P FWv` (permutation moved out of
    /// the softmax): max absolute residual across heads.
    pub permuted_vs_factored: f64,
    /// `softmax(QWq Wk^T F^T / sqrt(dk)) P^T P FWv` vs
    /// `softmax(QWq (FWk)^T / sqrt(dk)) FWv` (orthogonality cancels P): max
    /// absolute residual across heads.
    pub factored_vs_unpermuted: f64,
    /// Max absolute entry of `P^T P - I`; zero exactly.
    pub orthogonality: f64,
    /// `max |pool(F) - pool(PF)|` through the full multi-head module.
    pub pooled_difference: f64,
}

impl InvarianceReport {
    pub fn max_residual(&self) -> f64 {
        self.permuted_vs_factored
            .max(self.factored_vs_unpermuted)
            .max(self.orthogonality)
            .max(self.pooled_difference)
    }
}

/// Evaluate both sides of the two algebraic steps behind the permutation
/// invariance of the pooling, plus the end-to-end pooled difference.
pub fn verify_invariance_proof<S: Scalar>(
    features: &DenseMatrix<S>,
    params: &LearnablePoolingParams<S>,
    perm: &Permutation,
) -> Result<InvarianceReport> {
    if perm.len() != features.rows() {
        return Err(Error::InvalidArgument(format!(
            "permutation length {} does not match {} feature rows",
            perm.len(),
            features.rows()
        )));
    }
    let p = perm.to_matrix::<S>();
    let pf = p.matmul(features)?;

    let q_full = params.queries.value().matmul(&params.w_q.value())?;
    let k_full = features.matmul(&params.w_k.value())?;
    let v_full = features.matmul(&params.w_v.value())?;
    let pk_full = pf.matmul(&params.w_k.value())?;
    let pv_full = pf.matmul(&params.w_v.value())?;

    // P^T P compared against the identity, entry for entry.
    let ptp = p.transpose().matmul(&p)?;
    let orthogonality = ptp.max_abs_diff(&DenseMatrix::identity(p.rows()))?;
    let ptp_v = ptp.matmul(&v_full)?;

    let d_head = params.head_dim();
    let inv_sqrt = S::from_f64(1.0 / (d_head as f64).sqrt());
    let slice = |m: &DenseMatrix<S>, h: usize| -> DenseMatrix<S> {
        let mut out = DenseMatrix::zeros(m.rows(), d_head);
        for r in 0..m.rows() {
            out.row_mut(r)
                .copy_from_slice(&m.row(r)[h * d_head..(h + 1) * d_head]);
        }
        out
    };

    let mut permuted_vs_factored = 0.0f64;
    let mut factored_vs_unpermuted = 0.0f64;
    for h in 0..params.heads() {
        let q_h = slice(&q_full, h);
        let k_h = slice(&k_full, h);
        let v_h = slice(&v_full, h);
        let pk_h = slice(&pk_full, h);
        let pv_h = slice(&pv_full, h);
        let ptp_v_h = slice(&ptp_v, h);

        // Left side: permutation inside the softmax argument.
        let left = q_h
            .matmul_nt(&pk_h)?
            .scale(inv_sqrt)
            .softmax_rows()
            .matmul(&pv_h)?;
        // Middle: scores written via W_k^T F^T with P^T P pulled onto the values.
        let middle = q_h
            .matmul_nt(&k_h)?
            .scale(inv_sqrt)
            .softmax_rows()
            .matmul(&ptp_v_h)?;
        // Right side: no permutation anywhere.
        let right = q_h
            .matmul_nt(&k_h)?
            .scale(inv_sqrt)
            .softmax_rows()
            .matmul(&v_h)?;

        permuted_vs_factored = permuted_vs_factored.max(left.max_abs_diff(&middle)?);
        factored_vs_unpermuted = factored_vs_unpermuted.max(middle.max_abs_diff(&right)?);
    }

    let pooled = learnable_pool_values(features, params)?;
    let pooled_perm = learnable_pool_values(&apply_permutation(features, perm)?, params)?;
    let pooled_difference = pooled.max_abs_diff(&pooled_perm)?;

    Ok(InvarianceReport {
        permuted_vs_factored,
        factored_vs_unpermuted,
        orthogonality,
        pooled_difference,
    })
}
