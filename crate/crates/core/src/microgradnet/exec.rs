//! Graph execution: forward with optional variational sampling and memory
//! instrumentation, and the matching reverse pass.

use std::collections::BTreeMap;

use rand::{Rng, RngCore};
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::graph::{
    infer_shape_of, ArchGraph, DownsampleMode, LayerSpec, MergeLayout, Node, Padding,
};
use super::ops::{self, ConvGeom};
use super::store::{key, WeightStore, GROUP_LOG_SIGMA2, GROUP_MU, LOG_SIGMA2_SUFFIX};
use super::tensor::{Scalar, Tensor};
use super::NnError;

/// Gradients keyed like the parameters they belong to.
pub type Grads<T> = BTreeMap<String, Tensor<T>>;

/// Element counts of one computing step measured while executing it.
/// `held` counts tensors produced earlier that must stay resident because a
/// later step still reads them.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerFootprint {
    pub node: usize,
    pub name: String,
    pub input: usize,
    pub held: usize,
    pub output: usize,
    pub weights: usize,
}

pub struct RunOptions<'a> {
    /// Batchnorm uses batch statistics (and reports them for running averages).
    pub train: bool,
    /// Draws posterior noise for variational parameters when present.
    pub sample: Option<&'a mut dyn RngCore>,
    pub instrument: bool,
}

impl RunOptions<'_> {
    pub fn eval() -> Self {
        Self {
            train: false,
            sample: None,
            instrument: false,
        }
    }
    pub fn instrumented() -> Self {
        Self {
            train: false,
            sample: None,
            instrument: true,
        }
    }
    pub fn train() -> Self {
        Self {
            train: true,
            sample: None,
            instrument: false,
        }
    }
}

/// Result of a forward pass; keeps what the reverse pass needs.
pub struct Forward<T> {
    pub logits: Tensor<T>,
    pub footprints: Vec<LayerFootprint>,
    /// Per batchnorm node: batch `(mean, var)` when run in train mode.
    pub batch_stats: BTreeMap<String, (Vec<T>, Vec<T>)>,
    batch: usize,
    values: Vec<Vec<T>>,
    caches: Vec<Cache<T>>,
}

#[derive(Clone, Copy)]
enum LinKind {
    Conv(ConvGeom),
    Depthwise(ConvGeom),
    Dense {
        n: usize,
        fan_in: usize,
        fan_out: usize,
    },
}

impl LinKind {
    fn apply<T: Scalar>(&self, x: &[T], w: &[T]) -> Vec<T> {
        match *self {
            LinKind::Conv(g) => ops::conv2d(x, w, &g),
            LinKind::Depthwise(g) => ops::depthwise(x, w, &g),
            LinKind::Dense { n, fan_in, fan_out } => ops::dense(x, w, n, fan_in, fan_out),
        }
    }

    fn grad<T: Scalar>(&self, x: &[T], w: &[T], gy: &[T], need_input: bool) -> (Vec<T>, Vec<T>) {
        match *self {
            LinKind::Conv(g) => ops::conv2d_backward(x, w, gy, &g, need_input),
            LinKind::Depthwise(g) => ops::depthwise_backward(x, w, gy, &g, need_input),
            LinKind::Dense { n, fan_in, fan_out } => {
                ops::dense_backward(x, w, gy, n, fan_in, fan_out, need_input)
            }
        }
    }
}

struct Lrt<T> {
    x_sq: Vec<T>,
    sigma2: Vec<T>,
    eps: Vec<T>,
    std: Vec<T>,
}

/// One linear map `x -> x * W`. With a sampled posterior the output is drawn
/// through the local reparameterization: mean `x * mu`, variance `x^2 * sigma^2`.
struct Lin<T> {
    kind: LinKind,
    key: String,
    x: Vec<T>,
    lrt: Option<Lrt<T>>,
}

struct Group<T> {
    pre: Vec<T>,
    z: Vec<T>,
    eps: Option<Vec<T>>,
    groups: usize,
    plane: usize,
}

enum Cache<T> {
    None,
    Conv {
        lin: Lin<T>,
        bias: String,
        z: Option<Group<T>>,
    },
    Downsampled {
        reduce: Lin<T>,
        reduce_bias: String,
        conv: Lin<T>,
        bias: String,
        z: Option<Group<T>>,
    },
    Separable {
        dw: Lin<T>,
        pw: Lin<T>,
        bias: String,
        z: Option<Group<T>>,
    },
    Fc {
        lin: Lin<T>,
        bias: String,
        z: Option<Group<T>>,
        select: Option<Vec<usize>>,
        in_len: usize,
    },
    Bn {
        xhat: Vec<T>,
        inv_std: Vec<T>,
        batch: bool,
    },
    Pool {
        arg: Vec<usize>,
        in_len: usize,
    },
}

const LRT_FLOOR: f64 = 1e-8;

struct Ctx<'a, 'r, T> {
    ws: &'a WeightStore<T>,
    sample: Option<&'r mut dyn RngCore>,
    train: bool,
}

impl<T: Scalar> Ctx<'_, '_, T> {
    fn normal(&mut self, len: usize) -> Option<Vec<T>> {
        let rng = self.sample.as_mut()?;
        Some(
            (0..len)
                .map(|_| T::lit(rng.sample::<f64, _>(StandardNormal)))
                .collect(),
        )
    }

    fn lin(&mut self, kind: LinKind, x: Vec<T>, wkey: String) -> Result<(Vec<T>, Lin<T>), NnError> {
        let ws = self.ws;
        let w = ws.require(&wkey)?;
        let mean = kind.apply(&x, w.data());
        let ls_key = format!("{wkey}{LOG_SIGMA2_SUFFIX}");
        let ls = if self.sample.is_some() {
            ws.get(&ls_key)
        } else {
            None
        };
        let Some(ls) = ls else {
            return Ok((
                mean,
                Lin {
                    kind,
                    key: wkey,
                    x,
                    lrt: None,
                },
            ));
        };
        let sigma2: Vec<T> = ls.data().iter().map(|v| v.exp()).collect();
        let x_sq: Vec<T> = x.iter().map(|&v| v * v).collect();
        let var = kind.apply(&x_sq, &sigma2);
        let eps = self.normal(var.len()).expect("sampling enabled");
        let floor = T::lit(LRT_FLOOR);
        let std: Vec<T> = var.iter().map(|&v| (v + floor).sqrt()).collect();
        let out = mean
            .iter()
            .zip(&std)
            .zip(&eps)
            .map(|((&m, &s), &e)| m + s * e)
            .collect();
        Ok((
            out,
            Lin {
                kind,
                key: wkey,
                x,
                lrt: Some(Lrt {
                    x_sq,
                    sigma2,
                    eps,
                    std,
                }),
            },
        ))
    }

    /// Multiplies `groups` slices of `plane` elements per example by group scales.
    fn group(
        &mut self,
        node: &str,
        pre: Vec<T>,
        n: usize,
        groups: usize,
        plane: usize,
    ) -> (Vec<T>, Option<Group<T>>) {
        let ws = self.ws;
        let sampling = self.sample.is_some();
        let Some(mu) = ws.get(&key(node, GROUP_MU)) else {
            return (pre, None);
        };
        let mu = mu.data().to_vec();
        let (z, eps) = match ws.get(&key(node, GROUP_LOG_SIGMA2)).filter(|_| sampling) {
            Some(ls) => {
                let ls = ls.data().to_vec();
                let eps = self.normal(n * groups).expect("sampling enabled");
                let z: Vec<T> = (0..n * groups)
                    .map(|i| mu[i % groups] + (ls[i % groups] * T::lit(0.5)).exp() * eps[i])
                    .collect();
                (z, Some(eps))
            }
            None => ((0..n * groups).map(|i| mu[i % groups]).collect(), None),
        };
        let mut out = pre.clone();
        for (i, chunk) in out.chunks_mut(plane).enumerate() {
            let s = z[i];
            chunk.iter_mut().for_each(|v| *v = *v * s);
        }
        (
            out,
            Some(Group {
                pre,
                z,
                eps,
                groups,
                plane,
            }),
        )
    }
}

fn add_bias<T: Scalar>(y: &mut [T], b: &[T], plane: usize) {
    let c = b.len();
    for (i, chunk) in y.chunks_mut(plane).enumerate() {
        let bi = b[i % c];
        chunk.iter_mut().for_each(|v| *v = *v + bi);
    }
}

fn bias_grad<T: Scalar>(gy: &[T], c: usize, plane: usize) -> Vec<T> {
    let mut g = vec![T::zero(); c];
    for (i, chunk) in gy.chunks(plane).enumerate() {
        g[i % c] = g[i % c] + chunk.iter().copied().sum::<T>();
    }
    g
}

fn geom(in_shape: &[usize], n: usize, cout: usize, kernel: usize, padding: Padding) -> ConvGeom {
    let (h, w) = (in_shape[1], in_shape[2]);
    let (pt, _, ho) = padding.resolve(h, kernel).expect("validated");
    let (pl, _, wo) = padding.resolve(w, kernel).expect("validated");
    ConvGeom {
        n,
        cin: in_shape[0],
        h,
        w,
        cout,
        k: kernel,
        pad_t: pt,
        pad_l: pl,
        ho,
        wo,
    }
}

fn pointwise(g: &ConvGeom, cin: usize, cout: usize) -> ConvGeom {
    ConvGeom {
        n: g.n,
        cin,
        h: g.ho,
        w: g.wo,
        cout,
        k: 1,
        pad_t: 0,
        pad_l: 0,
        ho: g.ho,
        wo: g.wo,
    }
}

fn merge_axis(layout: MergeLayout, shape: &[usize]) -> (usize, usize) {
    match layout {
        MergeLayout::Channel => (shape[0], shape[1] * shape[2]),
        MergeLayout::Flat => (shape.iter().product(), 1),
    }
}

#[allow(clippy::too_many_arguments)]
fn node_forward<T: Scalar>(
    name: &str,
    op: &LayerSpec,
    in_shapes: &[&[usize]],
    out_shape: &[usize],
    inputs: &[&[T]],
    n: usize,
    ctx: &mut Ctx<'_, '_, T>,
    stats: &mut BTreeMap<String, (Vec<T>, Vec<T>)>,
) -> Result<(Vec<T>, Cache<T>), NnError> {
    let ws = ctx.ws;
    let plane_out = out_shape.iter().skip(1).product::<usize>().max(1);
    Ok(match op {
        LayerSpec::Input { .. } => (inputs[0].to_vec(), Cache::None),
        LayerSpec::InputDownsample { mode } => {
            let [c, h, w] = [in_shapes[0][0], in_shapes[0][1], in_shapes[0][2]];
            let (y, arg) = match *mode {
                DownsampleMode::Depth => ops::channel_max(inputs[0], n, c, h * w),
                DownsampleMode::Spatial { rate } => ops::max_pool(inputs[0], n * c, h, w, rate),
            };
            (
                y,
                Cache::Pool {
                    arg,
                    in_len: inputs[0].len(),
                },
            )
        }
        LayerSpec::MaxPool { window } => {
            let [c, h, w] = [in_shapes[0][0], in_shapes[0][1], in_shapes[0][2]];
            let (y, arg) = ops::max_pool(inputs[0], n * c, h, w, *window);
            (
                y,
                Cache::Pool {
                    arg,
                    in_len: inputs[0].len(),
                },
            )
        }
        LayerSpec::Conv2d {
            kernel,
            out_channels,
            padding,
        } => {
            let g = geom(in_shapes[0], n, *out_channels, *kernel, *padding);
            let (mut y, lin) =
                ctx.lin(LinKind::Conv(g), inputs[0].to_vec(), key(name, "weight"))?;
            let bias = key(name, "bias");
            add_bias(&mut y, ws.require(&bias)?.data(), plane_out);
            let (y, z) = ctx.group(name, y, n, *out_channels, plane_out);
            (y, Cache::Conv { lin, bias, z })
        }
        LayerSpec::DownsampledConv2d {
            kernel,
            out_channels,
            padding,
            reduced_channels,
        } => {
            let g = geom(in_shapes[0], n, *out_channels, *kernel, *padding);
            let gr = ConvGeom {
                cout: *reduced_channels,
                k: 1,
                pad_t: 0,
                pad_l: 0,
                ho: g.h,
                wo: g.w,
                ..g
            };
            let (mut t, reduce) = ctx.lin(
                LinKind::Conv(gr),
                inputs[0].to_vec(),
                key(name, "reduce_weight"),
            )?;
            let reduce_bias = key(name, "reduce_bias");
            add_bias(&mut t, ws.require(&reduce_bias)?.data(), g.in_plane());
            let g2 = ConvGeom {
                cin: *reduced_channels,
                ..g
            };
            let (mut y, conv) = ctx.lin(LinKind::Conv(g2), t, key(name, "weight"))?;
            let bias = key(name, "bias");
            add_bias(&mut y, ws.require(&bias)?.data(), plane_out);
            let (y, z) = ctx.group(name, y, n, *out_channels, plane_out);
            (
                y,
                Cache::Downsampled {
                    reduce,
                    reduce_bias,
                    conv,
                    bias,
                    z,
                },
            )
        }
        LayerSpec::SeparableConv2d {
            kernel,
            out_channels,
            padding,
        } => {
            let g = geom(in_shapes[0], n, in_shapes[0][0], *kernel, *padding);
            let (t, dw) = ctx.lin(
                LinKind::Depthwise(g),
                inputs[0].to_vec(),
                key(name, "depthwise"),
            )?;
            let gp = pointwise(&g, g.cin, *out_channels);
            let (mut y, pw) = ctx.lin(LinKind::Conv(gp), t, key(name, "pointwise"))?;
            let bias = key(name, "bias");
            add_bias(&mut y, ws.require(&bias)?.data(), plane_out);
            let (y, z) = ctx.group(name, y, n, *out_channels, plane_out);
            (y, Cache::Separable { dw, pw, bias, z })
        }
        LayerSpec::FullyConnected {
            out_features,
            input_select,
        } => {
            let x = inputs[0];
            let in_len = in_shapes[0].iter().product::<usize>();
            let xs: Vec<T> = match input_select {
                Some(sel) => (0..n)
                    .flat_map(|b| sel.iter().map(move |&j| x[b * in_len + j]))
                    .collect(),
                None => x.to_vec(),
            };
            let fan_in = xs.len() / n;
            let (xs, z) = ctx.group(name, xs, n, fan_in, 1);
            let kind = LinKind::Dense {
                n,
                fan_in,
                fan_out: *out_features,
            };
            let (mut y, lin) = ctx.lin(kind, xs, key(name, "weight"))?;
            let bias = key(name, "bias");
            add_bias(&mut y, ws.require(&bias)?.data(), 1);
            (
                y,
                Cache::Fc {
                    lin,
                    bias,
                    z,
                    select: input_select.clone(),
                    in_len,
                },
            )
        }
        LayerSpec::BatchNorm => {
            let (c, plane) = (in_shapes[0][0], in_shapes[0][1] * in_shapes[0][2]);
            let gamma = ws.require(&key(name, "gamma"))?.data();
            let beta = ws.require(&key(name, "beta"))?.data();
            let (y, xhat, inv_std) = if ctx.train {
                let s = ops::bn_stats(inputs[0], n, c, plane);
                let r = ops::bn_apply(inputs[0], n, c, plane, &s.mean, &s.var, gamma, beta);
                stats.insert(name.to_string(), (s.mean, s.var));
                r
            } else {
                let mean = ws.require(&key(name, "running_mean"))?.data();
                let var = ws.require(&key(name, "running_var"))?.data();
                ops::bn_apply(inputs[0], n, c, plane, mean, var, gamma, beta)
            };
            (
                y,
                Cache::Bn {
                    xhat,
                    inv_std,
                    batch: ctx.train,
                },
            )
        }
        LayerSpec::Relu => (
            inputs[0].iter().map(|&v| v.max(T::zero())).collect(),
            Cache::None,
        ),
        LayerSpec::MergeSum {
            layout,
            maps,
            width,
        } => {
            let plane = merge_axis(*layout, out_shape).1;
            let mut y = vec![T::zero(); n * width * plane];
            for ((x, shape), map) in inputs.iter().zip(in_shapes).zip(maps) {
                let c = merge_axis(*layout, shape).0;
                for b in 0..n {
                    for (ci, &dst) in map.iter().enumerate() {
                        let src = &x[(b * c + ci) * plane..][..plane];
                        let out = &mut y[(b * width + dst) * plane..][..plane];
                        out.iter_mut().zip(src).for_each(|(o, &s)| *o = *o + s);
                    }
                }
            }
            (y, Cache::None)
        }
        LayerSpec::MergeConcat { .. } => {
            let per: Vec<usize> = inputs.iter().map(|x| x.len() / n).collect();
            let mut y = Vec::with_capacity(per.iter().sum::<usize>() * n);
            for b in 0..n {
                for (x, &len) in inputs.iter().zip(&per) {
                    y.extend_from_slice(&x[b * len..(b + 1) * len]);
                }
            }
            (y, Cache::None)
        }
    })
}

/// Applies one layer to already-batched inputs (`[N, ...]`). Parameters are
/// looked up under the node name `layer`.
pub fn apply_layer<T: Scalar>(
    op: &LayerSpec,
    weights: &WeightStore<T>,
    inputs: &[&Tensor<T>],
) -> Result<Tensor<T>, NnError> {
    let n = inputs.first().map_or(0, |t| t.shape()[0]);
    if inputs.iter().any(|t| t.shape()[0] != n) {
        return Err(NnError::ShapeMismatch {
            node: "layer".into(),
            expected: "equal batch sizes".into(),
            got: format!(
                "{:?}",
                inputs
                    .iter()
                    .map(|t| t.shape().to_vec())
                    .collect::<Vec<_>>()
            ),
        });
    }
    let in_shapes: Vec<&[usize]> = inputs.iter().map(|t| &t.shape()[1..]).collect();
    let out_shape = infer_shape_of("layer", op, &in_shapes)?;
    let data: Vec<&[T]> = inputs.iter().map(|t| t.data()).collect();
    let mut ctx = Ctx {
        ws: weights,
        sample: None,
        train: false,
    };
    let (y, _) = node_forward(
        "layer",
        op,
        &in_shapes,
        &out_shape,
        &data,
        n,
        &mut ctx,
        &mut BTreeMap::new(),
    )?;
    let mut shape = vec![n];
    shape.extend_from_slice(&out_shape);
    Tensor::new(shape, y)
}

fn weight_count<T: Scalar>(ws: &WeightStore<T>, keys: &[String]) -> usize {
    keys.iter()
        .filter_map(|k| ws.get(k))
        .map(|t| t.count_nonzero())
        .sum()
}

/// Runtime memory bookkeeping over actual buffers.
struct Tracker {
    live: BTreeMap<usize, usize>,
    remaining: Vec<usize>,
    rows: Vec<LayerFootprint>,
}

impl Tracker {
    fn held(&self, own: &[usize]) -> usize {
        self.live
            .iter()
            .filter(|(id, _)| !own.contains(id))
            .map(|(_, &len)| len)
            .sum()
    }

    fn release(&mut self, inputs: &[usize]) {
        for &s in inputs {
            self.remaining[s] -= 1;
            if self.remaining[s] == 0 {
                self.live.remove(&s);
            }
        }
    }

    fn record<T: Scalar>(
        &mut self,
        id: usize,
        node: &Node,
        in_shape: &[usize],
        n: usize,
        values: &[Vec<T>],
        ws: &WeightStore<T>,
    ) {
        let inputs = &node.inputs;
        let own: usize = match &node.op {
            LayerSpec::FullyConnected {
                input_select: Some(sel),
                ..
            } => sel.len(),
            _ => inputs.iter().map(|&s| values[s].len() / n).sum(),
        };
        let out = values[id].len() / n;
        let name = &node.name;
        let k = |p: &str| vec![key(name, p)];
        let row = |step: String, input, held, output, weights| LayerFootprint {
            node: id,
            name: step,
            input,
            held,
            output,
            weights,
        };
        match &node.op {
            LayerSpec::Input { .. } => {}
            LayerSpec::BatchNorm | LayerSpec::Relu => {
                let s = inputs[0];
                if matches!(node.op, LayerSpec::BatchNorm) {
                    // Only batchnorm that could not be folded reaches execution
                    // here as a separate affine step.
                    let held = self.held(inputs);
                    let w = weight_count(ws, &[key(name, "gamma"), key(name, "beta")]);
                    self.rows.push(row(name.clone(), own, held, out, w));
                }
                self.release(&[s]);
            }
            LayerSpec::DownsampledConv2d {
                reduced_channels, ..
            } => {
                let held = self.held(inputs);
                let mid = reduced_channels * in_shape[1] * in_shape[2];
                let w1 =
                    weight_count(ws, &k("reduce_weight")) + weight_count(ws, &k("reduce_bias"));
                self.rows
                    .push(row(format!("{name}/reduce"), own, held, mid, w1));
                self.release(inputs);
                let held = self.held(&[]);
                let w2 = weight_count(ws, &k("weight")) + weight_count(ws, &k("bias"));
                self.rows
                    .push(row(format!("{name}/conv"), mid, held, out, w2));
            }
            LayerSpec::SeparableConv2d { .. } => {
                let held = self.held(inputs);
                let mid = in_shape[0] * node.out_shape[1] * node.out_shape[2];
                let w1 = weight_count(ws, &k("depthwise"));
                self.rows
                    .push(row(format!("{name}/depthwise"), own, held, mid, w1));
                self.release(inputs);
                let held = self.held(&[]);
                let w2 = weight_count(ws, &k("pointwise")) + weight_count(ws, &k("bias"));
                self.rows
                    .push(row(format!("{name}/pointwise"), mid, held, out, w2));
            }
            _ => {
                let held = self.held(inputs);
                let w = match node.op {
                    LayerSpec::Conv2d { .. } | LayerSpec::FullyConnected { .. } => {
                        weight_count(ws, &k("weight")) + weight_count(ws, &k("bias"))
                    }
                    _ => 0,
                };
                self.rows.push(row(name.clone(), own, held, out, w));
                self.release(inputs);
            }
        }
        if self.remaining[id] > 0 {
            self.live.insert(id, out);
        }
    }
}

/// Runs the graph on a `[N, C, H, W]` batch.
pub fn forward<T: Scalar>(
    graph: &ArchGraph,
    weights: &WeightStore<T>,
    batch: &Tensor<T>,
    opts: RunOptions<'_>,
) -> Result<Forward<T>, NnError> {
    let shape = graph.input_shape();
    if batch.shape().len() != 4 || batch.shape()[1..] != shape {
        return Err(NnError::ShapeMismatch {
            node: "input".into(),
            expected: format!("[N, {}, {}, {}]", shape[0], shape[1], shape[2]),
            got: format!("{:?}", batch.shape()),
        });
    }
    let n = batch.shape()[0];
    let mut ctx = Ctx {
        ws: weights,
        sample: opts.sample,
        train: opts.train,
    };
    let mut values: Vec<Vec<T>> = Vec::with_capacity(graph.nodes().len());
    let mut caches = Vec::with_capacity(graph.nodes().len());
    let mut stats = BTreeMap::new();
    let consumers = graph.consumers();
    let mut tracker = Tracker {
        live: BTreeMap::new(),
        remaining: consumers.iter().map(Vec::len).collect(),
        rows: Vec::new(),
    };
    for (id, node) in graph.nodes().iter().enumerate() {
        let (y, cache) = if id == 0 {
            (batch.data().to_vec(), Cache::None)
        } else {
            let in_shapes: Vec<&[usize]> = node
                .inputs
                .iter()
                .map(|&s| graph.node(s).out_shape.as_slice())
                .collect();
            let inputs: Vec<&[T]> = node.inputs.iter().map(|&s| values[s].as_slice()).collect();
            node_forward(
                &node.name,
                &node.op,
                &in_shapes,
                &node.out_shape,
                &inputs,
                n,
                &mut ctx,
                &mut stats,
            )?
        };
        values.push(y);
        caches.push(cache);
        if opts.instrument {
            let in_shape = node
                .inputs
                .first()
                .map_or(&[][..], |&s| graph.node(s).out_shape.as_slice());
            tracker.record(id, node, in_shape, n, &values, weights);
        }
    }
    let logits = Tensor::new(vec![n, graph.output_len()], values[graph.output()].clone())?;
    Ok(Forward {
        logits,
        footprints: tracker.rows,
        batch_stats: stats,
        batch: n,
        values,
        caches,
    })
}

fn accumulate<T: Scalar>(grads: &mut Grads<T>, ws: &WeightStore<T>, k: &str, g: Vec<T>) {
    match grads.get_mut(k) {
        Some(t) => t
            .data_mut()
            .iter_mut()
            .zip(g)
            .for_each(|(a, b)| *a = *a + b),
        None => {
            let shape = ws
                .get(k)
                .map(|t| t.shape().to_vec())
                .unwrap_or_else(|| vec![g.len()]);
            grads.insert(
                k.to_string(),
                Tensor::new(shape, g).expect("gradient matches parameter"),
            );
        }
    }
}

fn lin_backward<T: Scalar>(
    lin: &Lin<T>,
    ws: &WeightStore<T>,
    gy: &[T],
    need_input: bool,
    grads: &mut Grads<T>,
) -> Vec<T> {
    let w = ws.get(&lin.key).expect("forward used it");
    let (mut gx, gw) = lin.kind.grad(&lin.x, w.data(), gy, need_input);
    accumulate(grads, ws, &lin.key, gw);
    if let Some(l) = &lin.lrt {
        let half = T::lit(0.5);
        let gvar: Vec<T> = gy
            .iter()
            .zip(&l.eps)
            .zip(&l.std)
            .map(|((&g, &e), &s)| g * e * half / s)
            .collect();
        let (gxsq, gs2) = lin.kind.grad(&l.x_sq, &l.sigma2, &gvar, need_input);
        let gls: Vec<T> = gs2.iter().zip(&l.sigma2).map(|(&g, &s)| g * s).collect();
        accumulate(grads, ws, &format!("{}{LOG_SIGMA2_SUFFIX}", lin.key), gls);
        if need_input {
            let two = T::lit(2.0);
            for ((a, &b), &x) in gx.iter_mut().zip(&gxsq).zip(&lin.x) {
                *a = *a + two * x * b;
            }
        }
    }
    gx
}

fn group_backward<T: Scalar>(
    node: &str,
    g: &Group<T>,
    ws: &WeightStore<T>,
    gy: &[T],
    grads: &mut Grads<T>,
) -> Vec<T> {
    let mut gpre = gy.to_vec();
    let mut dmu = vec![T::zero(); g.groups];
    let mut dls = vec![T::zero(); g.groups];
    let ls = ws
        .get(&key(node, GROUP_LOG_SIGMA2))
        .map(|t| t.data().to_vec());
    for (i, (chunk, pre)) in gpre
        .chunks_mut(g.plane)
        .zip(g.pre.chunks(g.plane))
        .enumerate()
    {
        let dz = chunk
            .iter()
            .zip(pre)
            .fold(T::zero(), |a, (&d, &p)| a + d * p);
        let gi = i % g.groups;
        dmu[gi] = dmu[gi] + dz;
        if let (Some(eps), Some(ls)) = (&g.eps, &ls) {
            dls[gi] = dls[gi] + dz * eps[i] * T::lit(0.5) * (ls[gi] * T::lit(0.5)).exp();
        }
        let z = g.z[i];
        chunk.iter_mut().for_each(|v| *v = *v * z);
    }
    accumulate(grads, ws, &key(node, GROUP_MU), dmu);
    if g.eps.is_some() {
        accumulate(grads, ws, &key(node, GROUP_LOG_SIGMA2), dls);
    }
    gpre
}

/// Reverse pass from `d_logits` (same layout as the logits). Returns the
/// gradient of every parameter that influenced the output.
pub fn backward<T: Scalar>(
    graph: &ArchGraph,
    weights: &WeightStore<T>,
    fwd: &Forward<T>,
    d_logits: &[T],
) -> Result<Grads<T>, NnError> {
    if d_logits.len() != fwd.logits.len() {
        return Err(NnError::InvalidShape(format!(
            "d_logits has {} values, logits {}",
            d_logits.len(),
            fwd.logits.len()
        )));
    }
    let n = fwd.batch;
    let mut grads: Grads<T> = BTreeMap::new();
    let mut gvals: Vec<Option<Vec<T>>> = vec![None; graph.nodes().len()];
    gvals[graph.output()] = Some(d_logits.to_vec());
    for id in (1..graph.nodes().len()).rev() {
        let Some(gy) = gvals[id].take() else { continue };
        let node = graph.node(id);
        let name = &node.name;
        let need = node.inputs.iter().any(|&s| s != 0);
        let in_grads: Vec<Vec<T>> = match (&node.op, &fwd.caches[id]) {
            (LayerSpec::Conv2d { .. }, Cache::Conv { lin, bias, z }) => {
                let gy = match z {
                    Some(g) => group_backward(name, g, weights, &gy, &mut grads),
                    None => gy,
                };
                let c = weights.require(bias)?.len();
                accumulate(
                    &mut grads,
                    weights,
                    bias,
                    bias_grad(&gy, c, gy.len() / (n * c)),
                );
                vec![lin_backward(lin, weights, &gy, need, &mut grads)]
            }
            (
                LayerSpec::DownsampledConv2d { .. },
                Cache::Downsampled {
                    reduce,
                    reduce_bias,
                    conv,
                    bias,
                    z,
                },
            ) => {
                let gy = match z {
                    Some(g) => group_backward(name, g, weights, &gy, &mut grads),
                    None => gy,
                };
                let c = weights.require(bias)?.len();
                accumulate(
                    &mut grads,
                    weights,
                    bias,
                    bias_grad(&gy, c, gy.len() / (n * c)),
                );
                let gt = lin_backward(conv, weights, &gy, true, &mut grads);
                let cr = weights.require(reduce_bias)?.len();
                accumulate(
                    &mut grads,
                    weights,
                    reduce_bias,
                    bias_grad(&gt, cr, gt.len() / (n * cr)),
                );
                vec![lin_backward(reduce, weights, &gt, need, &mut grads)]
            }
            (LayerSpec::SeparableConv2d { .. }, Cache::Separable { dw, pw, bias, z }) => {
                let gy = match z {
                    Some(g) => group_backward(name, g, weights, &gy, &mut grads),
                    None => gy,
                };
                let c = weights.require(bias)?.len();
                accumulate(
                    &mut grads,
                    weights,
                    bias,
                    bias_grad(&gy, c, gy.len() / (n * c)),
                );
                let gt = lin_backward(pw, weights, &gy, true, &mut grads);
                vec![lin_backward(dw, weights, &gt, need, &mut grads)]
            }
            (
                LayerSpec::FullyConnected { .. },
                Cache::Fc {
                    lin,
                    bias,
                    z,
                    select,
                    in_len,
                },
            ) => {
                let c = weights.require(bias)?.len();
                accumulate(&mut grads, weights, bias, bias_grad(&gy, c, 1));
                let gxs = lin_backward(lin, weights, &gy, true, &mut grads);
                let gxs = match z {
                    Some(g) => group_backward(name, g, weights, &gxs, &mut grads),
                    None => gxs,
                };
                match select {
                    Some(sel) => {
                        let mut gx = vec![T::zero(); n * in_len];
                        for b in 0..n {
                            for (j, &src) in sel.iter().enumerate() {
                                gx[b * in_len + src] = gxs[b * sel.len() + j];
                            }
                        }
                        vec![gx]
                    }
                    None => vec![gxs],
                }
            }
            (
                LayerSpec::BatchNorm,
                Cache::Bn {
                    xhat,
                    inv_std,
                    batch,
                },
            ) => {
                let shape = &graph.node(node.inputs[0]).out_shape;
                let (c, plane) = (shape[0], shape[1] * shape[2]);
                let gamma = weights.require(&key(name, "gamma"))?.data();
                if *batch {
                    let (dx, dg, db) =
                        ops::bn_backward_batch(&gy, xhat, inv_std, gamma, n, c, plane);
                    accumulate(&mut grads, weights, &key(name, "gamma"), dg);
                    accumulate(&mut grads, weights, &key(name, "beta"), db);
                    vec![dx]
                } else {
                    let mut dg = vec![T::zero(); c];
                    let db = bias_grad(&gy, c, plane);
                    let mut dx = gy.clone();
                    for (i, (chunk, xh)) in dx.chunks_mut(plane).zip(xhat.chunks(plane)).enumerate()
                    {
                        let ch = i % c;
                        dg[ch] = dg[ch]
                            + chunk
                                .iter()
                                .zip(xh)
                                .fold(T::zero(), |a, (&g, &h)| a + g * h);
                        let s = gamma[ch] * inv_std[ch];
                        chunk.iter_mut().for_each(|v| *v = *v * s);
                    }
                    accumulate(&mut grads, weights, &key(name, "gamma"), dg);
                    accumulate(&mut grads, weights, &key(name, "beta"), db);
                    vec![dx]
                }
            }
            (LayerSpec::Relu, _) => {
                let y = &fwd.values[id];
                vec![gy
                    .iter()
                    .zip(y)
                    .map(|(&g, &v)| if v > T::zero() { g } else { T::zero() })
                    .collect()]
            }
            (
                LayerSpec::MaxPool { .. } | LayerSpec::InputDownsample { .. },
                Cache::Pool { arg, in_len },
            ) => {
                vec![ops::route_grad(&gy, arg, *in_len)]
            }
            (
                LayerSpec::MergeSum {
                    layout,
                    maps,
                    width,
                },
                _,
            ) => {
                let plane = merge_axis(*layout, &node.out_shape).1;
                node.inputs
                    .iter()
                    .zip(maps)
                    .map(|(&s, map)| {
                        let c = merge_axis(*layout, &graph.node(s).out_shape).0;
                        let mut gx = vec![T::zero(); n * c * plane];
                        for b in 0..n {
                            for (ci, &dst) in map.iter().enumerate() {
                                gx[(b * c + ci) * plane..][..plane]
                                    .copy_from_slice(&gy[(b * width + dst) * plane..][..plane]);
                            }
                        }
                        gx
                    })
                    .collect()
            }
            (LayerSpec::MergeConcat { .. }, _) => {
                let per: Vec<usize> = node
                    .inputs
                    .iter()
                    .map(|&s| graph.node(s).out_len())
                    .collect();
                let total: usize = per.iter().sum();
                let mut outs: Vec<Vec<T>> =
                    per.iter().map(|&l| Vec::with_capacity(l * n)).collect();
                for b in 0..n {
                    let mut off = b * total;
                    for (o, &l) in outs.iter_mut().zip(&per) {
                        o.extend_from_slice(&gy[off..off + l]);
                        off += l;
                    }
                }
                outs
            }
            (op, _) => {
                return Err(NnError::Graph(format!(
                    "no reverse rule for {} at {name}",
                    op.kind_name()
                )))
            }
        };
        for (&s, g) in node.inputs.iter().zip(in_grads) {
            if s == 0 || g.is_empty() {
                continue;
            }
            match &mut gvals[s] {
                Some(acc) => acc.iter_mut().zip(g).for_each(|(a, b)| *a = *a + b),
                slot => *slot = Some(g),
            }
        }
    }
    Ok(grads)
}

/// Mean softmax cross-entropy over the batch and its gradient w.r.t. logits.
pub fn softmax_cross_entropy<T: Scalar>(logits: &Tensor<T>, labels: &[usize]) -> (f64, Vec<T>) {
    let (n, k) = (logits.shape()[0], logits.shape()[1]);
    let mut loss = 0.0;
    let mut grad = vec![T::zero(); n * k];
    let inv_n = 1.0 / n as f64;
    for (b, row) in logits.data().chunks(k).enumerate() {
        let row: Vec<f64> = row.iter().map(|v| v.to_f64().unwrap()).collect();
        let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = row.iter().map(|v| (v - m).exp()).sum();
        let lse = m + z.ln();
        loss += (lse - row[labels[b]]) * inv_n;
        for (j, &v) in row.iter().enumerate() {
            let p = (v - lse).exp();
            let t = if j == labels[b] { 1.0 } else { 0.0 };
            grad[b * k + j] = T::lit((p - t) * inv_n);
        }
    }
    (loss, grad)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::microgradnet::GraphBuilder;

    #[test]
    fn relu_clamps_negatives() {
        let x = Tensor::new(vec![1, 3], vec![-1.0f32, 0.0, 2.0]).unwrap();
        let y = apply_layer(&LayerSpec::Relu, &WeightStore::default(), &[&x]).unwrap();
        assert_eq!(y.data(), &[0.0, 0.0, 2.0]);
    }

    #[test]
    fn separable_with_zero_weights_outputs_zero() {
        let op = LayerSpec::SeparableConv2d {
            kernel: 3,
            out_channels: 4,
            padding: Padding::Same,
        };
        let mut ws = WeightStore::<f32>::default();
        ws.insert("layer/depthwise", Tensor::zeros(&[2, 1, 3, 3]));
        ws.insert("layer/pointwise", Tensor::zeros(&[4, 2, 1, 1]));
        ws.insert("layer/bias", Tensor::zeros(&[4]));
        let x = Tensor::from_fn(&[3, 2, 5, 5], |i| i as f32 * 0.1 - 4.0);
        let y = apply_layer(&op, &ws, &[&x]).unwrap();
        assert_eq!(y.shape(), &[3, 4, 5, 5]);
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn single_fc_on_one_hot_selects_weight_row() {
        let mut b = GraphBuilder::input([4, 1, 1]);
        let fc = b
            .push(
                "fc",
                LayerSpec::FullyConnected {
                    out_features: 3,
                    input_select: None,
                },
                &[0],
            )
            .unwrap();
        let g = b.finish(fc).unwrap();
        let mut ws = WeightStore::<f64>::default();
        let w = Tensor::from_fn(&[4, 3], |i| i as f64);
        ws.insert("fc/weight", w.clone());
        ws.insert("fc/bias", Tensor::zeros(&[3]));
        let x = Tensor::new(vec![1, 4, 1, 1], vec![0.0, 0.0, 1.0, 0.0]).unwrap();
        let out = forward(&g, &ws, &x, RunOptions::eval()).unwrap();
        assert_eq!(out.logits.data(), &w.data()[6..9]);
    }

    #[test]
    fn merge_sum_is_commutative() {
        let x = Tensor::from_fn(&[2, 6], |i| (i as f32).sin());
        let y = Tensor::from_fn(&[2, 4], |i| (i as f32).cos());
        let ab = crate::microgradnet::padded_merge(&[&[6], &[4]]);
        let ba = crate::microgradnet::padded_merge(&[&[4], &[6]]);
        let ws = WeightStore::default();
        let s1 = apply_layer(&ab, &ws, &[&x, &y]).unwrap();
        let s2 = apply_layer(&ba, &ws, &[&y, &x]).unwrap();
        assert_eq!(s1, s2);
    }

    #[test]
    fn cross_entropy_gradient_sums_to_zero_per_row() {
        let logits = Tensor::new(vec![2, 3], vec![1.0f64, 2.0, 3.0, -1.0, 0.0, 5.0]).unwrap();
        let (loss, g) = softmax_cross_entropy(&logits, &[2, 0]);
        assert!(loss > 0.0);
        for row in g.chunks(3) {
            assert!(row.iter().sum::<f64>().abs() < 1e-12);
        }
    }
}
