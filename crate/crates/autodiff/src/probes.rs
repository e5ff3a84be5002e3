//! Named gradient checks for every differentiable primitive.
//!
//! Each probe builds a small random instance whose inputs are all trainable
//! entries of a `f64` [`ParamStore`], reduces the op output with a fixed
//! random weighting (a plain sum would give degenerate gradients for
//! softmax and the normalizations) and runs [`grad_check`].

use crate::error::Result;
use crate::gradcheck::{grad_check, GradCheckOptions, GradCheckReport};
use crate::ops::{BatchNormMode, PoolKind};
use crate::params::ParamStore;
use crate::rng::RngState;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// A gradient check over one family of random instances.
pub trait GradProbe: Send + Sync {
    fn name(&self) -> &'static str;

    /// Builds the instance for `instance_seed` and checks it.
    fn check(&self, instance_seed: u64, opts: &GradCheckOptions) -> Result<GradCheckReport>;
}

type Builder = fn(&mut RngState) -> Instance;
type Forward = fn(&ParamStore<f64>, &mut Tape<f64>, &Extra) -> Result<Var>;

/// Non-trainable data an instance needs besides its inputs.
#[derive(Clone, Debug, Default)]
pub struct Extra {
    pub ints: Vec<usize>,
    pub tensors: Vec<Tensor<f64>>,
}

pub struct Instance {
    params: ParamStore<f64>,
    extra: Extra,
}

struct Primitive {
    name: &'static str,
    build: Builder,
    forward: Forward,
}

impl GradProbe for Primitive {
    fn name(&self) -> &'static str {
        self.name
    }

    fn check(&self, instance_seed: u64, opts: &GradCheckOptions) -> Result<GradCheckReport> {
        let mut rng = RngState::derive_indexed(instance_seed, self.name, 0);
        let Instance { mut params, extra } = (self.build)(&mut rng);
        // The output weighting is the last extra tensor.
        let fwd = self.forward;
        grad_check(
            |p, tape| {
                let out = fwd(p, tape, &extra)?;
                let w = tape.input(extra.tensors.last().expect("weighting").clone());
                let prod = tape.mul(out, w)?;
                Ok(tape.sum(prod))
            },
            &mut params,
            opts,
        )
    }
}

fn uniform(rng: &mut RngState, shape: &[usize]) -> Tensor<f64> {
    rng.uniform_tensor(shape, -1.0, 1.0)
}

fn store(rng: &mut RngState, entries: &[(&str, &[usize])]) -> ParamStore<f64> {
    let mut p = ParamStore::new();
    for (name, shape) in entries {
        p.insert_param(*name, uniform(rng, shape));
    }
    p
}

fn with_weight(params: ParamStore<f64>, mut extra: Extra, out_shape: &[usize], rng: &mut RngState) -> Instance {
    extra.tensors.push(uniform(rng, out_shape));
    Instance { params, extra }
}

fn dim(rng: &mut RngState, lo: usize, hi: usize) -> usize {
    lo + rng.below(hi - lo + 1)
}

fn p(tape: &mut Tape<f64>, s: &ParamStore<f64>, name: &str) -> Result<Var> {
    tape.param(s, name)
}

/// All primitive probes, in a fixed order.
pub fn primitive_probes() -> Vec<Box<dyn GradProbe>> {
    let list: Vec<Primitive> = vec![
        Primitive {
            name: "matmul",
            build: |rng| {
                let (m, k, n) = (dim(rng, 1, 4), dim(rng, 1, 5), dim(rng, 1, 4));
                let s = store(rng, &[("a", &[m, k]), ("b", &[k, n])]);
                with_weight(s, Extra::default(), &[m, n], rng)
            },
            forward: |s, t, _| {
                let (a, b) = (p(t, s, "a")?, p(t, s, "b")?);
                t.matmul(a, b)
            },
        },
        Primitive {
            name: "linear",
            build: |rng| {
                let (r, i, o) = (dim(rng, 1, 3), dim(rng, 1, 5), dim(rng, 1, 4));
                let s = store(rng, &[("x", &[2, r, i]), ("w", &[i, o]), ("b", &[o])]);
                with_weight(s, Extra::default(), &[2, r, o], rng)
            },
            forward: |s, t, _| {
                let (x, w, b) = (p(t, s, "x")?, p(t, s, "w")?, p(t, s, "b")?);
                t.linear(x, w, Some(b))
            },
        },
        Primitive {
            name: "conv2d",
            build: |rng| {
                let (n, c, o) = (dim(rng, 1, 2), dim(rng, 1, 3), dim(rng, 1, 3));
                let k = [1, 3][rng.below(2)];
                let stride = dim(rng, 1, 2);
                let pad = rng.below(2);
                let (h, w) = (dim(rng, 3, 6), dim(rng, 3, 6));
                let s = store(rng, &[("x", &[n, c, h, w]), ("w", &[o, c, k, k]), ("b", &[o])]);
                let oh = (h + 2 * pad - k) / stride + 1;
                let ow = (w + 2 * pad - k) / stride + 1;
                with_weight(s, Extra { ints: vec![stride, pad], ..Extra::default() }, &[n, o, oh, ow], rng)
            },
            forward: |s, t, e| {
                let (x, w, b) = (p(t, s, "x")?, p(t, s, "w")?, p(t, s, "b")?);
                t.conv2d(x, w, Some(b), e.ints[0], e.ints[1])
            },
        },
        Primitive {
            name: "pool_max",
            build: |rng| {
                let s = store(rng, &[("x", &[2, 2, 4, 4])]);
                with_weight(s, Extra::default(), &[2, 2, 2, 2], rng)
            },
            forward: |s, t, _| {
                let x = p(t, s, "x")?;
                t.pool2d(x, PoolKind::Max, 2, 2)
            },
        },
        Primitive {
            name: "pool_avg",
            build: |rng| {
                let s = store(rng, &[("x", &[2, 2, 5, 5])]);
                with_weight(s, Extra::default(), &[2, 2, 2, 2], rng)
            },
            forward: |s, t, _| {
                let x = p(t, s, "x")?;
                t.pool2d(x, PoolKind::Avg, 3, 2)
            },
        },
        Primitive {
            name: "adaptive_avg_pool",
            build: |rng| {
                let (h, w) = (dim(rng, 2, 7), dim(rng, 2, 7));
                let (oh, ow) = (dim(rng, 1, 5), dim(rng, 1, 5));
                let s = store(rng, &[("x", &[1, 2, h, w])]);
                with_weight(s, Extra { ints: vec![oh, ow], ..Extra::default() }, &[1, 2, oh, ow], rng)
            },
            forward: |s, t, e| {
                let x = p(t, s, "x")?;
                t.adaptive_avg_pool2d(x, e.ints[0], e.ints[1])
            },
        },
        Primitive {
            name: "relu",
            build: |rng| {
                let s = store(rng, &[("x", &[3, 7])]);
                with_weight(s, Extra::default(), &[3, 7], rng)
            },
            forward: |s, t, _| {
                let x = p(t, s, "x")?;
                Ok(t.relu(x))
            },
        },
        Primitive {
            name: "gelu",
            build: |rng| {
                let s = store(rng, &[("x", &[3, 7])]);
                with_weight(s, Extra::default(), &[3, 7], rng)
            },
            forward: |s, t, _| {
                let x = p(t, s, "x")?;
                Ok(t.gelu(x))
            },
        },
        Primitive {
            name: "softmax",
            build: |rng| {
                let axis = rng.below(3);
                let s = store(rng, &[("x", &[2, 3, 4])]);
                with_weight(s, Extra { ints: vec![axis], ..Extra::default() }, &[2, 3, 4], rng)
            },
            forward: |s, t, e| {
                let x = p(t, s, "x")?;
                t.softmax(x, e.ints[0])
            },
        },
        Primitive {
            name: "layer_norm",
            build: |rng| {
                let d = dim(rng, 2, 6);
                let s = store(rng, &[("x", &[2, 3, d]), ("gamma", &[d]), ("beta", &[d])]);
                with_weight(s, Extra::default(), &[2, 3, d], rng)
            },
            forward: |s, t, _| {
                let (x, g, b) = (p(t, s, "x")?, p(t, s, "gamma")?, p(t, s, "beta")?);
                t.layer_norm(x, g, b, 1e-5)
            },
        },
        Primitive {
            name: "batch_norm",
            build: |rng| {
                let c = dim(rng, 1, 3);
                let s = store(rng, &[("x", &[3, c, 2, 3]), ("gamma", &[c]), ("beta", &[c])]);
                with_weight(s, Extra::default(), &[3, c, 2, 3], rng)
            },
            forward: |s, t, _| {
                let (x, g, b) = (p(t, s, "x")?, p(t, s, "gamma")?, p(t, s, "beta")?);
                t.batch_norm(x, g, b, None, BatchNormMode::Train, 1e-5, "bn")
            },
        },
        Primitive {
            name: "batch_norm_infer",
            build: |rng| {
                let s = store(rng, &[("x", &[2, 3, 2, 2]), ("gamma", &[3]), ("beta", &[3])]);
                let mean = uniform(rng, &[3]);
                let var = rng.uniform_tensor(&[3], 0.5, 2.0);
                with_weight(s, Extra { tensors: vec![mean, var], ..Extra::default() }, &[2, 3, 2, 2], rng)
            },
            forward: |s, t, e| {
                let (x, g, b) = (p(t, s, "x")?, p(t, s, "gamma")?, p(t, s, "beta")?);
                let running = (&e.tensors[0], &e.tensors[1]);
                t.batch_norm(x, g, b, Some(running), BatchNormMode::Infer, 1e-5, "bn")
            },
        },
        Primitive {
            name: "gram",
            build: |rng| {
                let (c, h, w) = (dim(rng, 1, 4), dim(rng, 1, 4), dim(rng, 1, 4));
                let normalize = rng.below(2);
                let s = store(rng, &[("x", &[2, c, h, w])]);
                with_weight(s, Extra { ints: vec![normalize], ..Extra::default() }, &[2, c, c], rng)
            },
            forward: |s, t, e| {
                let x = p(t, s, "x")?;
                t.gram(x, e.ints[0] == 1)
            },
        },
        Primitive {
            name: "attention",
            build: |rng| {
                let heads = dim(rng, 1, 2);
                let d = heads * dim(rng, 1, 3);
                let (tq, tk) = (dim(rng, 1, 3), dim(rng, 1, 4));
                let s = store(rng, &[("q", &[2, tq, d]), ("k", &[2, tk, d]), ("v", &[2, tk, d])]);
                with_weight(s, Extra { ints: vec![heads], ..Extra::default() }, &[2, tq, d], rng)
            },
            forward: |s, t, e| {
                let (q, k, v) = (p(t, s, "q")?, p(t, s, "k")?, p(t, s, "v")?);
                t.attention(q, k, v, e.ints[0])
            },
        },
        Primitive {
            name: "concat_narrow",
            build: |rng| {
                let s = store(rng, &[("a", &[2, 2, 3]), ("b", &[2, 1, 3])]);
                with_weight(s, Extra::default(), &[2, 2, 3], rng)
            },
            forward: |s, t, _| {
                let (a, b) = (p(t, s, "a")?, p(t, s, "b")?);
                let c = t.concat(&[a, b], 1)?;
                t.narrow(c, 1, 1, 2)
            },
        },
        Primitive {
            name: "patchify",
            build: |rng| {
                let s = store(rng, &[("x", &[2, 2, 4, 4])]);
                with_weight(s, Extra::default(), &[2, 4, 8], rng)
            },
            forward: |s, t, _| {
                let x = p(t, s, "x")?;
                t.patchify(x, 2)
            },
        },
        Primitive {
            name: "broadcast",
            build: |rng| {
                let s = store(rng, &[("x", &[1, 3, 2]), ("pos", &[3, 2])]);
                with_weight(s, Extra::default(), &[4, 3, 2], rng)
            },
            forward: |s, t, _| {
                let (x, pos) = (p(t, s, "x")?, p(t, s, "pos")?);
                let e = t.expand(x, 4)?;
                let r = t.scale_rows(e, vec![1.0, 0.0, 2.0, -1.5])?;
                t.add_broadcast(r, pos)
            },
        },
        Primitive {
            name: "cross_entropy",
            build: |rng| {
                let s = store(rng, &[("logits", &[4, 2])]);
                let lam = rng.uniform();
                let targets = Tensor::from_fn([4, 2], |i| if i % 2 == 0 { lam } else { 1.0 - lam });
                with_weight(s, Extra { tensors: vec![targets], ..Extra::default() }, &[1], rng)
            },
            forward: |s, t, e| {
                let l = p(t, s, "logits")?;
                t.cross_entropy(l, e.tensors[0].clone())
            },
        },
    ];
    list.into_iter().map(|p| Box::new(p) as Box<dyn GradProbe>).collect()
}

/// Looks up a probe by name.
pub fn probe_by_name(name: &str) -> Option<Box<dyn GradProbe>> {
    primitive_probes().into_iter().find(|p| p.name() == name)
}
