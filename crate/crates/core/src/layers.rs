//! Neural building blocks: embedding lookup, 1-D convolution, max pooling,
//! GRU cells (uni- and bidirectional), dense layers, and inverted dropout.
//!
//! Each layer is a pure function over a [`Tape`]: parameters enter as tape
//! leaves and the backward pass falls out of the recorded graph. Sequence
//! tensors are [batch, time, channels]; per-step tensors are
//! [batch, features]. A single example is just batch size 1.

use crate::rng::Rng;
use crate::tensor::{Scalar, Tape, Tensor, Var};

/// Weights of one GRU direction.
///
/// `w_*` map the input, `u_*` map the previous hidden state, `b_*` are the
/// gate biases; `z` is the update gate, `r` the reset gate, `h` the
/// candidate state.
#[derive(Clone, Debug)]
pub struct GruParams<T> {
    pub w_z: Tensor<T>,
    pub w_r: Tensor<T>,
    pub w_h: Tensor<T>,
    pub u_z: Tensor<T>,
    pub u_r: Tensor<T>,
    pub u_h: Tensor<T>,
    pub b_z: Tensor<T>,
    pub b_r: Tensor<T>,
    pub b_h: Tensor<T>,
}

impl<T: Scalar> GruParams<T> {
    pub fn new(d_in: usize, d_h: usize, rng: &mut Rng) -> Self {
        GruParams {
            w_z: Tensor::glorot(&[d_in, d_h], d_in, d_h, rng),
            w_r: Tensor::glorot(&[d_in, d_h], d_in, d_h, rng),
            w_h: Tensor::glorot(&[d_in, d_h], d_in, d_h, rng),
            u_z: Tensor::glorot(&[d_h, d_h], d_h, d_h, rng),
            u_r: Tensor::glorot(&[d_h, d_h], d_h, d_h, rng),
            u_h: Tensor::glorot(&[d_h, d_h], d_h, d_h, rng),
            b_z: Tensor::zeros(&[d_h]),
            b_r: Tensor::zeros(&[d_h]),
            b_h: Tensor::zeros(&[d_h]),
        }
    }

    pub fn zeros(d_in: usize, d_h: usize) -> Self {
        GruParams {
            w_z: Tensor::zeros(&[d_in, d_h]),
            w_r: Tensor::zeros(&[d_in, d_h]),
            w_h: Tensor::zeros(&[d_in, d_h]),
            u_z: Tensor::zeros(&[d_h, d_h]),
            u_r: Tensor::zeros(&[d_h, d_h]),
            u_h: Tensor::zeros(&[d_h, d_h]),
            b_z: Tensor::zeros(&[d_h]),
            b_r: Tensor::zeros(&[d_h]),
            b_h: Tensor::zeros(&[d_h]),
        }
    }

    pub fn hidden_dim(&self) -> usize {
        self.b_z.dim(0)
    }
}

/// GRU weights as tape leaves, ready to build steps with.
#[derive(Clone, Copy, Debug)]
pub struct GruVars {
    pub w_z: Var,
    pub w_r: Var,
    pub w_h: Var,
    pub u_z: Var,
    pub u_r: Var,
    pub u_h: Var,
    pub b_z: Var,
    pub b_r: Var,
    pub b_h: Var,
}

impl GruVars {
    pub fn leaf<T: Scalar>(tape: &mut Tape<T>, p: &GruParams<T>) -> Self {
        GruVars {
            w_z: tape.leaf(p.w_z.clone()),
            w_r: tape.leaf(p.w_r.clone()),
            w_h: tape.leaf(p.w_h.clone()),
            u_z: tape.leaf(p.u_z.clone()),
            u_r: tape.leaf(p.u_r.clone()),
            u_h: tape.leaf(p.u_h.clone()),
            b_z: tape.leaf(p.b_z.clone()),
            b_r: tape.leaf(p.b_r.clone()),
            b_h: tape.leaf(p.b_h.clone()),
        }
    }
}

/// 1-D convolution weights: `kernels` is [filters, kernel_size, channels_in].
#[derive(Clone, Debug)]
pub struct ConvParams<T> {
    pub kernels: Tensor<T>,
    pub bias: Tensor<T>,
}

impl<T: Scalar> ConvParams<T> {
    pub fn new(n_filters: usize, kernel_size: usize, d_in: usize, rng: &mut Rng) -> Self {
        ConvParams {
            kernels: Tensor::glorot(
                &[n_filters, kernel_size, d_in],
                kernel_size * d_in,
                n_filters,
                rng,
            ),
            bias: Tensor::zeros(&[n_filters]),
        }
    }
}

impl<T: Scalar> Tape<T> {
    /// Row lookup: `ids` index into `table` [vocab, embed]; output is
    /// [batch, time, embed]. Backward scatters into the looked-up rows, so a
    /// row used twice receives both contributions.
    pub fn embedding(&mut self, ids: &[u32], batch: usize, time: usize, table: Var) -> Var {
        assert_eq!(ids.len(), batch * time, "id count must equal batch * time");
        let tt = self.value(table);
        assert_eq!(tt.rank(), 2, "embedding table must be rank 2");
        let (vocab, embed) = (tt.dim(0), tt.dim(1));
        for &id in ids {
            assert!((id as usize) < vocab, "token id {} out of vocabulary range {}", id, vocab);
        }
        let mut out = Tensor::zeros(&[batch, time, embed]);
        for (pos, &id) in ids.iter().enumerate() {
            out.data_mut()[pos * embed..(pos + 1) * embed]
                .copy_from_slice(&tt.data()[id as usize * embed..(id as usize + 1) * embed]);
        }
        let ids = ids.to_vec();
        self.push_op(
            out,
            Box::new(move |_, g, sink| {
                let gt = sink.entry(table, &[vocab, embed]);
                for (pos, &id) in ids.iter().enumerate() {
                    let row = &mut gt.data_mut()[id as usize * embed..(id as usize + 1) * embed];
                    for (r, &gi) in row.iter_mut().zip(&g.data()[pos * embed..(pos + 1) * embed]) {
                        *r += gi;
                    }
                }
            }),
        )
    }

    /// Same-padding cross-correlation along time, before any activation.
    /// `x` is [batch, time, c_in], kernels [filters, k, c_in]; output is
    /// [batch, time, filters]. `k` must be odd so the padding is symmetric.
    pub fn conv1d(&mut self, x: Var, kernels: Var, bias: Var) -> Var {
        let tx = self.value(x);
        let tk = self.value(kernels);
        assert_eq!(tx.rank(), 3, "conv1d input must be rank 3");
        assert_eq!(tk.rank(), 3, "conv1d kernels must be rank 3");
        let (batch, time, c_in) = (tx.dim(0), tx.dim(1), tx.dim(2));
        let (filters, k, kc) = (tk.dim(0), tk.dim(1), tk.dim(2));
        assert_eq!(c_in, kc, "kernel channel count {} does not match input {}", kc, c_in);
        assert!(k % 2 == 1, "conv1d requires an odd kernel size, got {}", k);
        assert_eq!(self.value(bias).shape(), [filters], "bias must have one entry per filter");
        let pad = (k - 1) / 2;
        let window = k * c_in;

        // im2col: windows[t] = padded input slice around t, flattened, so the
        // convolution is one matrix product per example.
        let build_cols = move |xd: &[T], b: usize| -> Vec<T> {
            let mut cols = vec![T::zero(); time * window];
            for t in 0..time {
                for kk in 0..k {
                    let src = t + kk;
                    if src < pad || src - pad >= time {
                        continue;
                    }
                    let src_t = src - pad;
                    let from = (b * time + src_t) * c_in;
                    let to = t * window + kk * c_in;
                    cols[to..to + c_in].copy_from_slice(&xd[from..from + c_in]);
                }
            }
            cols
        };

        let mut out = Tensor::zeros(&[batch, time, filters]);
        {
            let tb = self.value(bias);
            for b in 0..batch {
                let cols = build_cols(tx.data(), b);
                let orow = &mut out.data_mut()[b * time * filters..(b + 1) * time * filters];
                crate::tensor::matmul_nt_acc(orow, &cols, tk.data(), time, window, filters);
                for row in orow.chunks_mut(filters) {
                    for (o, &bv) in row.iter_mut().zip(tb.data()) {
                        *o += bv;
                    }
                }
            }
        }

        self.push_op(
            out,
            Box::new(move |vals, g, sink| {
                let xd = vals[x.index()].data().to_vec();
                let kd = vals[kernels.index()].data().to_vec();
                for b in 0..batch {
                    let gb = &g.data()[b * time * filters..(b + 1) * time * filters];
                    let cols = build_cols(&xd, b);
                    // kernel grad: gᵀ · cols
                    {
                        let gk = sink.entry(kernels, &[filters, k, c_in]);
                        crate::tensor::matmul_tn_acc(gk.data_mut(), gb, &cols, time, filters, window);
                    }
                    // input grad: scatter g · kernels back through the windows
                    let mut gcols = vec![T::zero(); time * window];
                    crate::tensor::matmul_acc(&mut gcols, gb, &kd, time, filters, window);
                    {
                        let gx = sink.entry(x, &[batch, time, c_in]);
                        for t in 0..time {
                            for kk in 0..k {
                                let src = t + kk;
                                if src < pad || src - pad >= time {
                                    continue;
                                }
                                let src_t = src - pad;
                                let to = (b * time + src_t) * c_in;
                                let from = t * window + kk * c_in;
                                for (dst, &gi) in gx.data_mut()[to..to + c_in]
                                    .iter_mut()
                                    .zip(&gcols[from..from + c_in])
                                {
                                    *dst += gi;
                                }
                            }
                        }
                    }
                    // bias grad: per-filter column sums
                    let gbias = sink.entry(bias, &[filters]);
                    for row in gb.chunks(filters) {
                        for (bv, &gi) in gbias.data_mut().iter_mut().zip(row) {
                            *bv += gi;
                        }
                    }
                }
            }),
        )
    }

    /// Per-channel max over non-overlapping windows along time; a final
    /// partial window is pooled as-is. Backward routes each window's
    /// gradient to the first index that attains the max.
    pub fn maxpool1d(&mut self, x: Var, pool: usize) -> Var {
        assert!(pool >= 1, "pool width must be at least 1");
        let tx = self.value(x);
        assert_eq!(tx.rank(), 3, "maxpool1d input must be rank 3");
        let (batch, time, ch) = (tx.dim(0), tx.dim(1), tx.dim(2));
        let out_t = time.div_ceil(pool);
        let mut out = Tensor::zeros(&[batch, out_t, ch]);
        let mut argmax = vec![0u32; batch * out_t * ch];
        for b in 0..batch {
            for ot in 0..out_t {
                let t0 = ot * pool;
                let t1 = (t0 + pool).min(time);
                for c in 0..ch {
                    let mut best = tx.data()[(b * time + t0) * ch + c];
                    let mut best_t = t0;
                    for t in t0 + 1..t1 {
                        let v = tx.data()[(b * time + t) * ch + c];
                        if v > best {
                            best = v;
                            best_t = t;
                        }
                    }
                    out.data_mut()[(b * out_t + ot) * ch + c] = best;
                    argmax[(b * out_t + ot) * ch + c] = ((b * time + best_t) * ch + c) as u32;
                }
            }
        }
        self.push_op(
            out,
            Box::new(move |_, g, sink| {
                let gx = sink.entry(x, &[batch, time, ch]);
                for (pos, &src) in argmax.iter().enumerate() {
                    gx.data_mut()[src as usize] += g.data()[pos];
                }
            }),
        )
    }
}

/// Embedding lookup as a layer: ids [batch, time] against a table leaf.
pub fn embedding_forward<T: Scalar>(
    tape: &mut Tape<T>,
    ids: &[u32],
    batch: usize,
    time: usize,
    table: Var,
) -> Var {
    tape.embedding(ids, batch, time, table)
}

/// Convolution layer: same-padding cross-correlation plus bias, then ReLU.
pub fn conv1d_forward<T: Scalar>(tape: &mut Tape<T>, x: Var, kernels: Var, bias: Var) -> Var {
    let pre = tape.conv1d(x, kernels, bias);
    tape.relu(pre)
}

/// One GRU step over a batch.
///
/// z = σ(x·W_z + h·U_z + b_z), r = σ(x·W_r + h·U_r + b_r),
/// h̃ = tanh(x·W_h + (r⊙h)·U_h + b_h), h' = (1−z)⊙h + z⊙h̃.
pub fn gru_step<T: Scalar>(tape: &mut Tape<T>, x_t: Var, h_prev: Var, p: &GruVars) -> Var {
    let gate = |tape: &mut Tape<T>, w: Var, u: Var, b: Var, hin: Var| {
        let xw = tape.matmul(x_t, w);
        let hu = tape.matmul(hin, u);
        let s = tape.add(xw, hu);
        tape.add_bias(s, b)
    };
    let z_pre = gate(tape, p.w_z, p.u_z, p.b_z, h_prev);
    let z = tape.sigmoid(z_pre);
    let r_pre = gate(tape, p.w_r, p.u_r, p.b_r, h_prev);
    let r = tape.sigmoid(r_pre);
    let rh = tape.mul(r, h_prev);
    let cand_pre = gate(tape, p.w_h, p.u_h, p.b_h, rh);
    let cand = tape.tanh(cand_pre);
    let one = tape.leaf(Tensor::scalar(T::one()));
    let zc = tape.sub(one, z);
    let keep = tape.mul(zc, h_prev);
    let update = tape.mul(z, cand);
    tape.add(keep, update)
}

/// Bidirectional GRU over a [batch, time, features] sequence.
///
/// The forward direction scans left to right, the backward direction right
/// to left, from zero initial states. With `return_sequences` the per-step
/// states are concatenated into [batch, time, 2·hidden]; otherwise the
/// output is [batch, 2·hidden] holding each direction's final state.
pub fn bigru_forward<T: Scalar>(
    tape: &mut Tape<T>,
    x: Var,
    fwd: &GruVars,
    bwd: &GruVars,
    hidden: usize,
    return_sequences: bool,
) -> Var {
    let tx = tape.value(x);
    assert_eq!(tx.rank(), 3, "bigru input must be rank 3");
    let (batch, time) = (tx.dim(0), tx.dim(1));
    assert!(time >= 1, "bigru requires at least one timestep");

    let mut h_f = tape.leaf(Tensor::zeros(&[batch, hidden]));
    let mut fwd_states = Vec::with_capacity(time);
    for t in 0..time {
        let x_t = tape.slice_time(x, t);
        h_f = gru_step(tape, x_t, h_f, fwd);
        fwd_states.push(h_f);
    }

    let mut h_b = tape.leaf(Tensor::zeros(&[batch, hidden]));
    let mut bwd_states = vec![h_b; time];
    for t in (0..time).rev() {
        let x_t = tape.slice_time(x, t);
        h_b = gru_step(tape, x_t, h_b, bwd);
        bwd_states[t] = h_b;
    }

    if return_sequences {
        let steps: Vec<Var> = (0..time)
            .map(|t| tape.concat_cols(fwd_states[t], bwd_states[t]))
            .collect();
        tape.stack_time(&steps)
    } else {
        tape.concat_cols(fwd_states[time - 1], bwd_states[0])
    }
}

/// Output activation of a dense layer.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Sigmoid,
    None,
}

/// Affine map plus optional activation: act(x·W + b).
pub fn dense_forward<T: Scalar>(
    tape: &mut Tape<T>,
    x: Var,
    w: Var,
    b: Var,
    activation: Activation,
) -> Var {
    let xw = tape.matmul(x, w);
    let pre = tape.add_bias(xw, b);
    match activation {
        Activation::Relu => tape.relu(pre),
        Activation::Sigmoid => tape.sigmoid(pre),
        Activation::None => pre,
    }
}

/// Inverted dropout: in training each element is zeroed with probability
/// `rate` and survivors are scaled by 1/(1−rate); at inference the input
/// passes through untouched.
pub fn dropout<T: Scalar>(
    tape: &mut Tape<T>,
    x: Var,
    rate: f64,
    training: bool,
    rng: &mut Rng,
) -> Var {
    assert!((0.0..1.0).contains(&rate), "dropout rate must lie in [0, 1), got {}", rate);
    if !training || rate == 0.0 {
        return x;
    }
    let n = tape.value(x).size();
    let keep_scale = T::from_f64c(1.0 / (1.0 - rate));
    let mask: Vec<T> =
        (0..n).map(|_| if rng.next_f64() < rate { T::zero() } else { keep_scale }).collect();
    tape.mask_mul(x, mask)
}
