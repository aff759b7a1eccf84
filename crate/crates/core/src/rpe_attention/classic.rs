use crate::error::{Error, Result};
use crate::ndgrad::{init, kernels, Bound, DiffArray, ParamId, ParamStore, SeededRng, Tape, Var};
use crate::scalar::Real;

/// Baseline multi-head attention where positions are added to the tokens
/// before the Q/K/V projections.
#[derive(Clone, Debug)]
pub struct ClassicParams {
    pub d_model: usize,
    pub heads: usize,
    pub w_q: ParamId,
    pub w_k: ParamId,
    pub w_v: ParamId,
    pub out_w: ParamId,
    pub out_b: ParamId,
}

/// The three interaction terms of the additive-position logit matrix
/// `(X+P) W_Q ((X+P) W_K)ᵀ`.
#[derive(Clone, Debug)]
pub struct DecompositionTerms<T> {
    /// `X W_Q (X W_K)ᵀ`
    pub content_content: DiffArray<T>,
    /// `P W_Q (X W_K)ᵀ + X W_Q (P W_K)ᵀ`
    pub content_position: DiffArray<T>,
    /// `P W_Q (P W_K)ᵀ`
    pub position_position: DiffArray<T>,
}

impl ClassicParams {
    pub fn new<T: Real>(store: &mut ParamStore<T>, prefix: &str, d_model: usize, heads: usize, rng: &mut SeededRng) -> Result<Self> {
        if heads == 0 || !d_model.is_multiple_of(heads) {
            return Err(Error::Config(format!("d_model {d_model} not divisible by {heads} heads")));
        }
        let e = d_model;
        let mut mat = |name: &str, store: &mut ParamStore<T>| store.add(format!("{prefix}.{name}"), init::fan_in(&[e, e], e, rng));
        let w_q = mat("q.w", store);
        let w_k = mat("k.w", store);
        let w_v = mat("v.w", store);
        let out_w = mat("out.w", store);
        let out_b = store.add(format!("{prefix}.out.b"), DiffArray::zeros(&[e]));
        Ok(Self {
            d_model,
            heads,
            w_q,
            w_k,
            w_v,
            out_w,
            out_b,
        })
    }

    /// Returns the layer output and one attention matrix per head.
    pub fn forward<T: Real>(&self, t: &Tape<T>, b: &Bound, x: Var, additive_pos: Option<Var>) -> Result<(Var, Vec<Var>)> {
        let z = match additive_pos {
            Some(p) => {
                let (sx, sp) = (t.shape(x), t.shape(p));
                if sx != sp {
                    return Err(Error::shape("classic_mhsa", &sx, &sp));
                }
                t.add(x, p)?
            }
            None => x,
        };
        let d = self.d_model / self.heads;
        let q = t.matmul(z, b.var(self.w_q))?;
        let k = t.matmul(z, b.var(self.w_k))?;
        let v = t.matmul(z, b.var(self.w_v))?;
        let scale = T::one() / T::lit(d as f64).sqrt();
        let mut outs = Vec::with_capacity(self.heads);
        let mut attn = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let qh = t.narrow(q, 1, h * d, d)?;
            let kh = t.narrow(k, 1, h * d, d)?;
            let vh = t.narrow(v, 1, h * d, d)?;
            let kt = t.transpose(kh)?;
            let logits = t.matmul(qh, kt)?;
            let logits = t.scale(logits, scale)?;
            let a = t.softmax(logits)?;
            outs.push(t.matmul(a, vh)?);
            attn.push(a);
        }
        let cat = t.concat(&outs, 1)?;
        let o = t.matmul(cat, b.var(self.out_w))?;
        Ok((t.add(o, b.var(self.out_b))?, attn))
    }

    /// Output rows for token matrix `x` with optional additive positions.
    pub fn output<T: Real>(&self, store: &ParamStore<T>, x: &DiffArray<T>, additive_pos: Option<&DiffArray<T>>) -> Result<DiffArray<T>> {
        let t = Tape::new();
        let b = store.bind_frozen(&t);
        let xv = t.constant(x.clone());
        let pv = additive_pos.map(|p| t.constant(p.clone()));
        let (o, _) = self.forward(&t, &b, xv, pv)?;
        let out = t.value(o).clone();
        Ok(out)
    }

    /// Full-width logit decomposition (before scaling, summed over heads).
    pub fn decomposition<T: Real>(&self, store: &ParamStore<T>, x: &DiffArray<T>, p: &DiffArray<T>) -> Result<DecompositionTerms<T>> {
        if x.shape() != p.shape() || x.ndim() != 2 || x.shape()[1] != self.d_model {
            return Err(Error::shape("decomposition_terms", x.shape(), p.shape()));
        }
        let (n, e) = (x.shape()[0], self.d_model);
        let wq = store.get(self.w_q).data();
        let wk = store.get(self.w_k).data();
        let xq = kernels::matmul(x.data(), wq, n, e, e);
        let xk = kernels::matmul(x.data(), wk, n, e, e);
        let pq = kernels::matmul(p.data(), wq, n, e, e);
        let pk = kernels::matmul(p.data(), wk, n, e, e);
        let gram = |a: &[T], b: &[T]| kernels::matmul_bt(a, b, n, e, n);
        let cp: Vec<T> = gram(&pq, &xk).iter().zip(gram(&xq, &pk)).map(|(&a, b)| a + b).collect();
        Ok(DecompositionTerms {
            content_content: DiffArray::new(vec![n, n], gram(&xq, &xk))?,
            content_position: DiffArray::new(vec![n, n], cp)?,
            position_position: DiffArray::new(vec![n, n], gram(&pq, &pk))?,
        })
    }
}
