//! Dense multilayer perceptrons with hand-written backpropagation, Adam,
//! finite-difference Jacobians and a plain-text weights format.
//!
//! Every learned component (dynamics surrogate, contraction metric, actor,
//! critics) is an [`Mlp`]. Weights are stored row-major with shape
//! `(out, in)` per layer. All arithmetic is `f64` so that finite-difference
//! checks at 1e-4 relative tolerance are meaningful.

use std::fmt::Write as _;
use std::str::FromStr;

use nalgebra::DMatrix;
use rand::Rng;

#[derive(Debug, thiserror::Error)]
pub enum NnError {
    #[error("dimension mismatch in {what}: expected {expected}, got {got}")]
    Dimension {
        what: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("non-finite gradient in layer {layer}; step rejected")]
    NonFiniteGradient { layer: usize },
    #[error("non-finite function value when perturbing coordinate {coordinate} ({side})")]
    NonFiniteEvaluation {
        coordinate: usize,
        side: &'static str,
    },
    #[error("invalid network configuration: {0}")]
    Config(String),
    #[error("weights file, line {line}: {msg}")]
    Parse { line: usize, msg: String },
}

pub type Result<T> = std::result::Result<T, NnError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HiddenActivation {
    Relu,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum OutputActivation {
    Identity,
    /// `scale * tanh(z)`.
    Tanh { scale: f64 },
}

impl HiddenActivation {
    fn token(self) -> &'static str {
        match self {
            HiddenActivation::Relu => "relu",
        }
    }
}

impl OutputActivation {
    fn token(self) -> String {
        match self {
            OutputActivation::Identity => "identity".to_owned(),
            OutputActivation::Tanh { scale } => format!("tanh={scale:.16e}"),
        }
    }
}

/// A feed-forward network: ReLU hidden layers and an identity or scaled-tanh
/// output layer.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    sizes: Vec<usize>,
    weights: Vec<Vec<f64>>,
    biases: Vec<Vec<f64>>,
    hidden: HiddenActivation,
    output: OutputActivation,
}

/// Activations recorded by [`Mlp::forward_tape`] for a later backward pass.
#[derive(Debug, Clone, Default)]
pub struct Tape {
    /// `acts[0]` is the input, `acts[l + 1]` the post-activation of layer `l`.
    acts: Vec<Vec<f64>>,
    /// Pre-activation of each layer.
    pre: Vec<Vec<f64>>,
}

impl Tape {
    pub fn output(&self) -> &[f64] {
        self.acts.last().map(Vec::as_slice).unwrap_or(&[])
    }

    pub fn input(&self) -> &[f64] {
        self.acts.first().map(Vec::as_slice).unwrap_or(&[])
    }
}

/// Parameter gradients with the same shapes as the network parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Grads {
    pub weights: Vec<Vec<f64>>,
    pub biases: Vec<Vec<f64>>,
}

impl Grads {
    pub fn zeros_like(net: &Mlp) -> Self {
        Self {
            weights: net.weights.iter().map(|w| vec![0.0; w.len()]).collect(),
            biases: net.biases.iter().map(|b| vec![0.0; b.len()]).collect(),
        }
    }

    pub fn clear(&mut self) {
        self.weights.iter_mut().flatten().for_each(|g| *g = 0.0);
        self.biases.iter_mut().flatten().for_each(|g| *g = 0.0);
    }

    pub fn scale(&mut self, s: f64) {
        self.weights.iter_mut().flatten().for_each(|g| *g *= s);
        self.biases.iter_mut().flatten().for_each(|g| *g *= s);
    }

    pub fn add_assign(&mut self, other: &Grads) {
        for (a, b) in self.weights.iter_mut().zip(&other.weights) {
            a.iter_mut().zip(b).for_each(|(x, y)| *x += y);
        }
        for (a, b) in self.biases.iter_mut().zip(&other.biases) {
            a.iter_mut().zip(b).for_each(|(x, y)| *x += y);
        }
    }

    /// First layer index holding a non-finite entry, if any.
    pub fn first_non_finite_layer(&self) -> Option<usize> {
        self.weights
            .iter()
            .zip(&self.biases)
            .position(|(w, b)| w.iter().chain(b).any(|g| !g.is_finite()))
    }

    pub fn norm(&self) -> f64 {
        self.weights
            .iter()
            .flatten()
            .chain(self.biases.iter().flatten())
            .map(|g| g * g)
            .sum::<f64>()
            .sqrt()
    }

    /// Rescale so the global norm does not exceed `max_norm`.
    pub fn clip_norm(&mut self, max_norm: f64) {
        let n = self.norm();
        if n > max_norm && n.is_finite() {
            self.scale(max_norm / n);
        }
    }

    pub fn flat(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for (w, b) in self.weights.iter().zip(&self.biases) {
            out.extend_from_slice(w);
            out.extend_from_slice(b);
        }
        out
    }
}

impl Mlp {
    /// He-uniform initialised network (`U(-sqrt(6/fan_in), sqrt(6/fan_in))`,
    /// zero biases).
    pub fn new<R: Rng + ?Sized>(
        sizes: &[usize],
        hidden: HiddenActivation,
        output: OutputActivation,
        rng: &mut R,
    ) -> Result<Self> {
        let mut net = Self::zeros(sizes, hidden, output)?;
        for (l, w) in net.weights.iter_mut().enumerate() {
            let limit = (6.0 / sizes[l] as f64).sqrt();
            for v in w.iter_mut() {
                *v = rng.random_range(-limit..limit);
            }
        }
        Ok(net)
    }

    pub fn zeros(sizes: &[usize], hidden: HiddenActivation, output: OutputActivation) -> Result<Self> {
        if sizes.len() < 2 {
            return Err(NnError::Config("need at least input and output sizes".into()));
        }
        if sizes.contains(&0) {
            return Err(NnError::Config("layer sizes must be positive".into()));
        }
        let weights = sizes.windows(2).map(|p| vec![0.0; p[0] * p[1]]).collect();
        let biases = sizes[1..].iter().map(|&n| vec![0.0; n]).collect();
        Ok(Self {
            sizes: sizes.to_vec(),
            weights,
            biases,
            hidden,
            output,
        })
    }

    /// Build from explicit per-layer parameters (row-major `out x in`).
    pub fn from_parts(
        sizes: &[usize],
        weights: Vec<Vec<f64>>,
        biases: Vec<Vec<f64>>,
        hidden: HiddenActivation,
        output: OutputActivation,
    ) -> Result<Self> {
        let mut net = Self::zeros(sizes, hidden, output)?;
        if weights.len() != net.weights.len() || biases.len() != net.biases.len() {
            return Err(NnError::Config("layer count does not match sizes".into()));
        }
        for l in 0..net.num_layers() {
            if weights[l].len() != net.weights[l].len() {
                return Err(NnError::Dimension {
                    what: "layer weights",
                    expected: net.weights[l].len(),
                    got: weights[l].len(),
                });
            }
            if biases[l].len() != net.biases[l].len() {
                return Err(NnError::Dimension {
                    what: "layer biases",
                    expected: net.biases[l].len(),
                    got: biases[l].len(),
                });
            }
        }
        net.weights = weights;
        net.biases = biases;
        Ok(net)
    }

    pub fn sizes(&self) -> &[usize] {
        &self.sizes
    }

    pub fn num_layers(&self) -> usize {
        self.weights.len()
    }

    pub fn input_dim(&self) -> usize {
        self.sizes[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.sizes.last().expect("sizes non-empty")
    }

    pub fn weights(&self, layer: usize) -> &[f64] {
        &self.weights[layer]
    }

    pub fn biases(&self, layer: usize) -> &[f64] {
        &self.biases[layer]
    }

    pub fn weights_mut(&mut self, layer: usize) -> &mut [f64] {
        &mut self.weights[layer]
    }

    pub fn biases_mut(&mut self, layer: usize) -> &mut [f64] {
        &mut self.biases[layer]
    }

    pub fn hidden_activation(&self) -> HiddenActivation {
        self.hidden
    }

    pub fn output_activation(&self) -> OutputActivation {
        self.output
    }

    pub fn num_params(&self) -> usize {
        self.weights.iter().map(Vec::len).sum::<usize>() + self.biases.iter().map(Vec::len).sum::<usize>()
    }

    fn check_input(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.input_dim() {
            return Err(NnError::Dimension {
                what: "network input",
                expected: self.input_dim(),
                got: x.len(),
            });
        }
        Ok(())
    }

    fn affine(&self, l: usize, x: &[f64], out: &mut Vec<f64>) {
        let n_in = self.sizes[l];
        out.clear();
        out.extend(self.biases[l].iter().zip(self.weights[l].chunks_exact(n_in)).map(|(b, row)| {
            b + row.iter().zip(x).map(|(w, v)| w * v).sum::<f64>()
        }));
    }

    fn activate(&self, l: usize, z: &mut [f64]) {
        if l + 1 < self.num_layers() {
            match self.hidden {
                HiddenActivation::Relu => z.iter_mut().for_each(|v| *v = v.max(0.0)),
            }
        } else if let OutputActivation::Tanh { scale } = self.output {
            z.iter_mut().for_each(|v| *v = scale * v.tanh());
        }
    }

    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.check_input(x)?;
        let mut cur = x.to_vec();
        let mut next = Vec::new();
        for l in 0..self.num_layers() {
            self.affine(l, &cur, &mut next);
            self.activate(l, &mut next);
            std::mem::swap(&mut cur, &mut next);
        }
        Ok(cur)
    }

    /// Forward pass that records activations; reuses the tape's buffers.
    pub fn forward_tape(&self, x: &[f64], tape: &mut Tape) -> Result<()> {
        self.check_input(x)?;
        let n = self.num_layers();
        tape.acts.resize_with(n + 1, Vec::new);
        tape.pre.resize_with(n, Vec::new);
        tape.acts[0].clear();
        tape.acts[0].extend_from_slice(x);
        for l in 0..n {
            let (head, tail) = tape.acts.split_at_mut(l + 1);
            self.affine(l, &head[l], &mut tape.pre[l]);
            let a = &mut tail[0];
            a.clear();
            a.extend_from_slice(&tape.pre[l]);
            self.activate(l, a);
        }
        Ok(())
    }

    /// Backpropagate `d_out` through the recorded tape, accumulating parameter
    /// gradients into `grads`. Returns the gradient with respect to the input.
    pub fn backward_accumulate(&self, tape: &Tape, d_out: &[f64], grads: &mut Grads) -> Result<Vec<f64>> {
        if d_out.len() != self.output_dim() {
            return Err(NnError::Dimension {
                what: "output gradient",
                expected: self.output_dim(),
                got: d_out.len(),
            });
        }
        if tape.pre.len() != self.num_layers() {
            return Err(NnError::Dimension {
                what: "tape layers",
                expected: self.num_layers(),
                got: tape.pre.len(),
            });
        }
        let n = self.num_layers();
        let mut delta = d_out.to_vec();
        for l in (0..n).rev() {
            // d(pre-activation)
            if l + 1 == n {
                if let OutputActivation::Tanh { scale } = self.output {
                    for (d, z) in delta.iter_mut().zip(&tape.pre[l]) {
                        let t = z.tanh();
                        *d *= scale * (1.0 - t * t);
                    }
                }
            } else {
                match self.hidden {
                    HiddenActivation::Relu => {
                        for (d, z) in delta.iter_mut().zip(&tape.pre[l]) {
                            if *z <= 0.0 {
                                *d = 0.0;
                            }
                        }
                    }
                }
            }
            let n_in = self.sizes[l];
            let input = &tape.acts[l];
            let gw = &mut grads.weights[l];
            for (i, &d) in delta.iter().enumerate() {
                grads.biases[l][i] += d;
                if d != 0.0 {
                    for (g, x) in gw[i * n_in..(i + 1) * n_in].iter_mut().zip(input) {
                        *g += d * x;
                    }
                }
            }
            let mut prev = vec![0.0; n_in];
            for (i, &d) in delta.iter().enumerate() {
                if d != 0.0 {
                    for (p, w) in prev.iter_mut().zip(&self.weights[l][i * n_in..(i + 1) * n_in]) {
                        *p += d * w;
                    }
                }
            }
            delta = prev;
        }
        Ok(delta)
    }

    /// Parameter gradients of `d_out · net(x)` for a single input.
    pub fn backward(&self, x: &[f64], d_out: &[f64]) -> Result<(Grads, Vec<f64>)> {
        let mut tape = Tape::default();
        self.forward_tape(x, &mut tape)?;
        let mut grads = Grads::zeros_like(self);
        let d_in = self.backward_accumulate(&tape, d_out, &mut grads)?;
        Ok((grads, d_in))
    }

    /// `self <- tau * other + (1 - tau) * self`.
    pub fn soft_update_from(&mut self, other: &Mlp, tau: f64) {
        for (a, b) in self.weights.iter_mut().zip(&other.weights) {
            a.iter_mut().zip(b).for_each(|(x, y)| *x = tau * y + (1.0 - tau) * *x);
        }
        for (a, b) in self.biases.iter_mut().zip(&other.biases) {
            a.iter_mut().zip(b).for_each(|(x, y)| *x = tau * y + (1.0 - tau) * *x);
        }
    }

    pub fn is_finite(&self) -> bool {
        self.weights.iter().chain(&self.biases).flatten().all(|v| v.is_finite())
    }

    /// Serialise in the `mlpv1` text format.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        self.write_text(&mut s);
        s
    }

    pub fn write_text(&self, s: &mut String) {
        let _ = writeln!(
            s,
            "mlpv1 {} {}:{}",
            self.num_layers(),
            self.hidden.token(),
            self.output.token()
        );
        for l in 0..self.num_layers() {
            let (n_in, n_out) = (self.sizes[l], self.sizes[l + 1]);
            let _ = writeln!(s, "{n_out} {n_in}");
            for row in self.weights[l].chunks_exact(n_in) {
                push_floats(s, row);
            }
            push_floats(s, &self.biases[l]);
        }
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut lines = LineReader::new(text);
        let net = Self::read_text(&mut lines)?;
        if let Some((n, _)) = lines.next_nonempty() {
            return Err(NnError::Parse {
                line: n,
                msg: "trailing content after network".into(),
            });
        }
        Ok(net)
    }

    pub(crate) fn read_text(lines: &mut LineReader<'_>) -> Result<Self> {
        let (ln, header) = lines.expect_line("mlpv1 header")?;
        let tokens: Vec<&str> = header.split_whitespace().collect();
        if tokens.len() != 3 || tokens[0] != "mlpv1" {
            return Err(NnError::Parse {
                line: ln,
                msg: format!("expected `mlpv1 <n_layers> <activation>`, got `{header}`"),
            });
        }
        let n_layers: usize = parse_tok(tokens[1], ln)?;
        let (hid, out) = tokens[2].split_once(':').ok_or_else(|| NnError::Parse {
            line: ln,
            msg: "activation must be `<hidden>:<output>`".into(),
        })?;
        let hidden = match hid {
            "relu" => HiddenActivation::Relu,
            other => {
                return Err(NnError::Parse {
                    line: ln,
                    msg: format!("unknown hidden activation `{other}`"),
                })
            }
        };
        let output = if out == "identity" {
            OutputActivation::Identity
        } else if let Some(sc) = out.strip_prefix("tanh=") {
            OutputActivation::Tanh {
                scale: parse_tok(sc, ln)?,
            }
        } else {
            return Err(NnError::Parse {
                line: ln,
                msg: format!("unknown output activation `{out}`"),
            });
        };
        let mut sizes = Vec::with_capacity(n_layers + 1);
        let mut weights = Vec::with_capacity(n_layers);
        let mut biases = Vec::with_capacity(n_layers);
        for _ in 0..n_layers {
            let (ln, dims) = lines.expect_line("layer dimensions")?;
            let d: Vec<usize> = dims
                .split_whitespace()
                .map(|t| parse_tok(t, ln))
                .collect::<Result<_>>()?;
            if d.len() != 2 {
                return Err(NnError::Parse {
                    line: ln,
                    msg: "dimension line must hold `<out> <in>`".into(),
                });
            }
            let (n_out, n_in) = (d[0], d[1]);
            match sizes.last() {
                None => sizes.push(n_in),
                Some(&prev) if prev != n_in => {
                    return Err(NnError::Parse {
                        line: ln,
                        msg: format!("layer input {n_in} does not chain with previous output {prev}"),
                    })
                }
                Some(_) => {}
            }
            sizes.push(n_out);
            let mut w = Vec::with_capacity(n_out * n_in);
            for _ in 0..n_out {
                let (ln, row) = lines.expect_line("weight row")?;
                let vals = parse_floats(row, ln)?;
                if vals.len() != n_in {
                    return Err(NnError::Parse {
                        line: ln,
                        msg: format!("weight row has {} values, expected {n_in}", vals.len()),
                    });
                }
                w.extend(vals);
            }
            let (ln, brow) = lines.expect_line("bias row")?;
            let b = parse_floats(brow, ln)?;
            if b.len() != n_out {
                return Err(NnError::Parse {
                    line: ln,
                    msg: format!("bias row has {} values, expected {n_out}", b.len()),
                });
            }
            weights.push(w);
            biases.push(b);
        }
        Self::from_parts(&sizes, weights, biases, hidden, output)
    }
}

/// Adam optimiser state for one network.
#[derive(Debug, Clone)]
pub struct AdamState {
    m: Grads,
    v: Grads,
    step: u64,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamState {
    pub fn new(net: &Mlp, learning_rate: f64) -> Self {
        Self {
            m: Grads::zeros_like(net),
            v: Grads::zeros_like(net),
            step: 0,
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// One bias-corrected Adam update. Non-finite gradients are rejected
    /// before anything is mutated.
    pub fn step(&mut self, net: &mut Mlp, grads: &Grads) -> Result<()> {
        if let Some(layer) = grads.first_non_finite_layer() {
            return Err(NnError::NonFiniteGradient { layer });
        }
        if grads.weights.len() != net.weights.len() {
            return Err(NnError::Dimension {
                what: "adam gradient layers",
                expected: net.weights.len(),
                got: grads.weights.len(),
            });
        }
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        let (b1, b2, lr, eps) = (self.beta1, self.beta2, self.learning_rate, self.eps);
        let update = |p: &mut [f64], g: &[f64], m: &mut [f64], v: &mut [f64]| {
            for i in 0..p.len() {
                m[i] = b1 * m[i] + (1.0 - b1) * g[i];
                v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
                let mh = m[i] / c1;
                let vh = v[i] / c2;
                p[i] -= lr * mh / (vh.sqrt() + eps);
            }
        };
        for l in 0..net.weights.len() {
            update(&mut net.weights[l], &grads.weights[l], &mut self.m.weights[l], &mut self.v.weights[l]);
            update(&mut net.biases[l], &grads.biases[l], &mut self.m.biases[l], &mut self.v.biases[l]);
        }
        Ok(())
    }
}

/// Adam on a single scalar parameter (used for the SAC temperature).
#[derive(Debug, Clone)]
pub struct ScalarAdam {
    m: f64,
    v: f64,
    step: u64,
    pub learning_rate: f64,
}

impl ScalarAdam {
    pub fn new(learning_rate: f64) -> Self {
        Self {
            m: 0.0,
            v: 0.0,
            step: 0,
            learning_rate,
        }
    }

    pub fn step(&mut self, param: &mut f64, grad: f64) -> Result<()> {
        if !grad.is_finite() {
            return Err(NnError::NonFiniteGradient { layer: 0 });
        }
        self.step += 1;
        self.m = 0.9 * self.m + 0.1 * grad;
        self.v = 0.999 * self.v + 0.001 * grad * grad;
        let mh = self.m / (1.0 - 0.9f64.powi(self.step as i32));
        let vh = self.v / (1.0 - 0.999f64.powi(self.step as i32));
        *param -= self.learning_rate * mh / (vh.sqrt() + 1e-8);
        Ok(())
    }
}

/// Central-difference Jacobian; entry `(i, j)` is
/// `(f_i(x + h e_j) - f_i(x - h e_j)) / 2h`.
pub fn jacobian_fd<F>(mut f: F, x: &[f64], h: f64) -> Result<DMatrix<f64>>
where
    F: FnMut(&[f64]) -> Vec<f64>,
{
    if !(h > 0.0) {
        return Err(NnError::Config(format!("finite-difference step must be positive, got {h}")));
    }
    let mut xp = x.to_vec();
    let mut jac: Option<DMatrix<f64>> = None;
    for j in 0..x.len() {
        xp[j] = x[j] + h;
        let fp = f(&xp);
        if fp.iter().any(|v| !v.is_finite()) {
            return Err(NnError::NonFiniteEvaluation {
                coordinate: j,
                side: "+h",
            });
        }
        xp[j] = x[j] - h;
        let fm = f(&xp);
        if fm.iter().any(|v| !v.is_finite()) {
            return Err(NnError::NonFiniteEvaluation {
                coordinate: j,
                side: "-h",
            });
        }
        xp[j] = x[j];
        let jm = jac.get_or_insert_with(|| DMatrix::zeros(fp.len(), x.len()));
        if fm.len() != jm.nrows() || fp.len() != jm.nrows() {
            return Err(NnError::Dimension {
                what: "finite-difference output",
                expected: jm.nrows(),
                got: fp.len(),
            });
        }
        for i in 0..fp.len() {
            jm[(i, j)] = (fp[i] - fm[i]) / (2.0 * h);
        }
    }
    Ok(jac.unwrap_or_else(|| DMatrix::zeros(0, 0)))
}

// ---- text format helpers -------------------------------------------------

pub(crate) fn push_floats(s: &mut String, vals: &[f64]) {
    for (i, v) in vals.iter().enumerate() {
        if i > 0 {
            s.push(' ');
        }
        let _ = write!(s, "{v:.16e}");
    }
    s.push('\n');
}

pub(crate) fn parse_floats(line: &str, ln: usize) -> Result<Vec<f64>> {
    line.split_whitespace().map(|t| parse_tok(t, ln)).collect()
}

pub(crate) fn parse_tok<T: FromStr>(tok: &str, ln: usize) -> Result<T> {
    tok.parse().map_err(|_| NnError::Parse {
        line: ln,
        msg: format!("cannot parse `{tok}`"),
    })
}

/// Line cursor over a text document (1-based line numbers, blank lines and
/// `#` comments skipped).
pub(crate) struct LineReader<'a> {
    lines: std::iter::Enumerate<std::str::Lines<'a>>,
}

impl<'a> LineReader<'a> {
    pub(crate) fn new(text: &'a str) -> Self {
        Self {
            lines: text.lines().enumerate(),
        }
    }

    pub(crate) fn next_nonempty(&mut self) -> Option<(usize, &'a str)> {
        for (i, l) in self.lines.by_ref() {
            let t = l.trim();
            if !t.is_empty() && !t.starts_with('#') {
                return Some((i + 1, t));
            }
        }
        None
    }

    pub(crate) fn expect_line(&mut self, what: &str) -> Result<(usize, &'a str)> {
        self.next_nonempty().ok_or_else(|| NnError::Parse {
            line: 0,
            msg: format!("unexpected end of file, expected {what}"),
        })
    }
}

/// Named collection of networks, vectors and scalars persisted as one text
/// file. Each network block uses the `mlpv1` format verbatim.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct WeightsBundle {
    entries: Vec<(String, BundleEntry)>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum BundleEntry {
    Net(Mlp),
    Vector(Vec<f64>),
    Scalar(f64),
}

impl WeightsBundle {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push_net(&mut self, name: &str, net: &Mlp) {
        self.entries.push((name.to_owned(), BundleEntry::Net(net.clone())));
    }

    pub fn push_vector(&mut self, name: &str, v: &[f64]) {
        self.entries.push((name.to_owned(), BundleEntry::Vector(v.to_vec())));
    }

    pub fn push_scalar(&mut self, name: &str, v: f64) {
        self.entries.push((name.to_owned(), BundleEntry::Scalar(v)));
    }

    fn get(&self, name: &str) -> Option<&BundleEntry> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, e)| e)
    }

    pub fn net(&self, name: &str) -> Result<&Mlp> {
        match self.get(name) {
            Some(BundleEntry::Net(n)) => Ok(n),
            _ => Err(NnError::Parse {
                line: 0,
                msg: format!("bundle has no network `{name}`"),
            }),
        }
    }

    pub fn vector(&self, name: &str) -> Result<&[f64]> {
        match self.get(name) {
            Some(BundleEntry::Vector(v)) => Ok(v),
            _ => Err(NnError::Parse {
                line: 0,
                msg: format!("bundle has no vector `{name}`"),
            }),
        }
    }

    pub fn scalar(&self, name: &str) -> Result<f64> {
        match self.get(name) {
            Some(BundleEntry::Scalar(v)) => Ok(*v),
            _ => Err(NnError::Parse {
                line: 0,
                msg: format!("bundle has no scalar `{name}`"),
            }),
        }
    }

    pub fn to_text(&self) -> String {
        let mut s = String::from("contraq-bundle 1\n");
        for (name, e) in &self.entries {
            match e {
                BundleEntry::Net(n) => {
                    let _ = writeln!(s, "net {name}");
                    n.write_text(&mut s);
                }
                BundleEntry::Vector(v) => {
                    let _ = writeln!(s, "vector {name} {}", v.len());
                    push_floats(&mut s, v);
                }
                BundleEntry::Scalar(v) => {
                    let _ = writeln!(s, "scalar {name} {v:.16e}");
                }
            }
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut lines = LineReader::new(text);
        let (ln, head) = lines.expect_line("bundle header")?;
        if head != "contraq-bundle 1" {
            return Err(NnError::Parse {
                line: ln,
                msg: format!("expected `contraq-bundle 1`, got `{head}`"),
            });
        }
        let mut out = Self::new();
        while let Some((ln, line)) = lines.next_nonempty() {
            let tokens: Vec<&str> = line.split_whitespace().collect();
            match tokens.as_slice() {
                ["net", name] => {
                    let net = Mlp::read_text(&mut lines)?;
                    out.push_net(name, &net);
                }
                ["vector", name, n] => {
                    let n: usize = parse_tok(n, ln)?;
                    let (ln2, row) = if n == 0 { (ln, "") } else { lines.expect_line("vector values")? };
                    let v = parse_floats(row, ln2)?;
                    if v.len() != n {
                        return Err(NnError::Parse {
                            line: ln2,
                            msg: format!("vector `{name}` has {} values, expected {n}", v.len()),
                        });
                    }
                    out.push_vector(name, &v);
                }
                ["scalar", name, v] => out.push_scalar(name, parse_tok(v, ln)?),
                _ => {
                    return Err(NnError::Parse {
                        line: ln,
                        msg: format!("unrecognised bundle entry `{line}`"),
                    })
                }
            }
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn seeded(sizes: &[usize], seed: u64) -> Mlp {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut net = Mlp::new(sizes, HiddenActivation::Relu, OutputActivation::Identity, &mut rng).unwrap();
        for l in 0..net.num_layers() {
            for b in net.biases_mut(l) {
                *b = rng.random_range(-0.1..0.1);
            }
        }
        net
    }

    #[test]
    fn zero_weights_give_zero_output() {
        let net = Mlp::zeros(&[3, 5, 2], HiddenActivation::Relu, OutputActivation::Identity).unwrap();
        assert_eq!(net.forward(&[1.0, -4.0, 2.5]).unwrap(), vec![0.0, 0.0]);
    }

    #[test]
    fn single_relu_layer_identity() {
        // one hidden ReLU layer with W = I, followed by an identity read-out
        let net = Mlp::from_parts(
            &[2, 2, 2],
            vec![vec![1.0, 0.0, 0.0, 1.0], vec![1.0, 0.0, 0.0, 1.0]],
            vec![vec![0.0; 2], vec![0.0; 2]],
            HiddenActivation::Relu,
            OutputActivation::Identity,
        )
        .unwrap();
        assert_eq!(net.forward(&[1.0, -1.0]).unwrap(), vec![1.0, 0.0]);
    }

    #[test]
    fn forward_matches_matrix_chain() {
        let net = seeded(&[4, 32, 32, 3], 11);
        let x = [0.3, -1.2, 0.7, 2.0];
        let got = net.forward(&x).unwrap();
        let mut a = nalgebra::DVector::from_column_slice(&x);
        for l in 0..net.num_layers() {
            let w = DMatrix::from_row_slice(net.sizes()[l + 1], net.sizes()[l], net.weights(l));
            let b = nalgebra::DVector::from_column_slice(net.biases(l));
            a = w * a + b;
            if l + 1 < net.num_layers() {
                a = a.map(|v| v.max(0.0));
            }
        }
        for (g, e) in got.iter().zip(a.iter()) {
            assert!((g - e).abs() <= 1e-12 * e.abs().max(1.0), "{g} vs {e}");
        }
    }

    #[test]
    fn dimension_mismatch_is_an_error() {
        let net = seeded(&[3, 4, 1], 0);
        assert!(matches!(net.forward(&[1.0]), Err(NnError::Dimension { .. })));
        assert!(net.backward(&[1.0, 2.0, 3.0], &[1.0, 1.0]).is_err());
    }

    #[test]
    fn linear_derivative() {
        let net = Mlp::from_parts(
            &[1, 1],
            vec![vec![0.7]],
            vec![vec![0.0]],
            HiddenActivation::Relu,
            OutputActivation::Identity,
        )
        .unwrap();
        let (g, d_in) = net.backward(&[2.0], &[1.0]).unwrap();
        assert_eq!(g.weights[0][0], 2.0);
        assert_eq!(g.biases[0][0], 1.0);
        assert_eq!(d_in, vec![0.7]);
    }

    #[test]
    fn zero_output_gradient_gives_zero_grads() {
        let net = seeded(&[3, 8, 2], 5);
        let (g, _) = net.backward(&[0.1, 0.2, 0.3], &[0.0, 0.0]).unwrap();
        assert!(g.flat().iter().all(|v| *v == 0.0));
    }

    /// Central-difference oracle on the scalar loss `c · net(x)`.
    fn fd_param_grad(net: &Mlp, x: &[f64], c: &[f64], h: f64) -> Vec<f64> {
        let loss = |n: &Mlp| -> f64 { n.forward(x).unwrap().iter().zip(c).map(|(a, b)| a * b).sum() };
        let mut out = Vec::new();
        let mut probe = net.clone();
        for l in 0..net.num_layers() {
            for i in 0..net.weights(l).len() {
                let w0 = probe.weights(l)[i];
                probe.weights_mut(l)[i] = w0 + h;
                let lp = loss(&probe);
                probe.weights_mut(l)[i] = w0 - h;
                let lm = loss(&probe);
                probe.weights_mut(l)[i] = w0;
                out.push((lp - lm) / (2.0 * h));
            }
            for i in 0..net.biases(l).len() {
                let b0 = probe.biases(l)[i];
                probe.biases_mut(l)[i] = b0 + h;
                let lp = loss(&probe);
                probe.biases_mut(l)[i] = b0 - h;
                let lm = loss(&probe);
                probe.biases_mut(l)[i] = b0;
                out.push((lp - lm) / (2.0 * h));
            }
        }
        out
    }

    #[test]
    fn backward_matches_finite_differences() {
        let net = seeded(&[5, 16, 16, 3], 42);
        let x = [0.4, -0.3, 1.1, 0.05, -0.9];
        let c = [1.0, -0.5, 0.25];
        let (g, _) = net.backward(&x, &c).unwrap();
        let fd = fd_param_grad(&net, &x, &c, 1e-5);
        for (a, b) in g.flat().iter().zip(&fd) {
            let scale = a.abs().max(b.abs()).max(1e-6);
            assert!((a - b).abs() / scale <= 1e-4, "{a} vs {b}");
        }
    }

    #[test]
    fn tanh_output_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let net = Mlp::new(&[2, 6, 2], HiddenActivation::Relu, OutputActivation::Tanh { scale: 2.5 }, &mut rng).unwrap();
        let x = [0.3, -0.8];
        let (g, _) = net.backward(&x, &[1.0, 1.0]).unwrap();
        let fd = fd_param_grad(&net, &x, &[1.0, 1.0], 1e-6);
        for (a, b) in g.flat().iter().zip(&fd) {
            assert!((a - b).abs() <= 1e-6 * a.abs().max(1.0));
        }
        let y = net.forward(&[50.0, -50.0]).unwrap();
        assert!(y.iter().all(|v| v.abs() <= 2.5));
    }

    #[test]
    fn adam_zero_gradient_is_fixed_point() {
        let mut net = seeded(&[3, 4, 2], 1);
        let before = net.clone();
        let mut adam = AdamState::new(&net, 1e-3);
        let g = Grads::zeros_like(&net);
        for _ in 0..10 {
            adam.step(&mut net, &g).unwrap();
        }
        assert_eq!(net, before);
        assert_eq!(adam.steps(), 10);
    }

    #[test]
    fn adam_first_step_is_learning_rate() {
        // bias-corrected m̂ = 1, v̂ = 1 → Δ = -lr / (1 + eps)
        let mut net = Mlp::from_parts(
            &[1, 1],
            vec![vec![0.0]],
            vec![vec![0.0]],
            HiddenActivation::Relu,
            OutputActivation::Identity,
        )
        .unwrap();
        let mut adam = AdamState::new(&net, 0.001);
        let mut g = Grads::zeros_like(&net);
        g.weights[0][0] = 1.0;
        adam.step(&mut net, &g).unwrap();
        let expected = -0.001 / (1.0 + 1e-8);
        assert!((net.weights(0)[0] - expected).abs() < 1e-15);
    }

    #[test]
    fn adam_rejects_nan_without_mutation() {
        let mut net = seeded(&[2, 3, 1], 3);
        let before = net.clone();
        let mut adam = AdamState::new(&net, 1e-3);
        let mut g = Grads::zeros_like(&net);
        g.biases[1][0] = f64::NAN;
        assert!(matches!(adam.step(&mut net, &g), Err(NnError::NonFiniteGradient { layer: 1 })));
        assert_eq!(net, before);
        assert_eq!(adam.steps(), 0);
    }

    #[test]
    fn jacobian_identity_and_constant() {
        let j = jacobian_fd(|x| x.to_vec(), &[0.5, -2.0, 3.0], 1e-4).unwrap();
        assert!((j - DMatrix::identity(3, 3)).abs().max() < 1e-10);
        let j = jacobian_fd(|_| vec![4.0, 1.0], &[1.0, 2.0], 1e-4).unwrap();
        assert_eq!(j, DMatrix::zeros(2, 2));
    }

    #[test]
    fn jacobian_quadratic_against_analytic() {
        let j = jacobian_fd(|x| vec![x[0] * x[0], x[0] * x[1]], &[1.0, 2.0], 1e-5).unwrap();
        let expected = DMatrix::from_row_slice(2, 2, &[2.0, 0.0, 2.0, 1.0]);
        assert!((j - expected).abs().max() < 1e-6);
    }

    #[test]
    fn jacobian_reports_offending_coordinate() {
        let err = jacobian_fd(|x| vec![if x[1] > 1.0 { f64::NAN } else { x[1] }], &[0.0, 1.0], 0.1).unwrap_err();
        assert!(matches!(err, NnError::NonFiniteEvaluation { coordinate: 1, side: "+h" }));
        assert!(jacobian_fd(|x| x.to_vec(), &[0.0], 0.0).is_err());
    }

    #[test]
    fn parse_rejects_broken_chain() {
        let text = "mlpv1 2 relu:identity\n2 1\n1\n1\n0 0\n1 3\n1 1 1\n0\n";
        assert!(Mlp::from_text(text).is_err());
    }

    #[test]
    fn bundle_round_trip() {
        let net = seeded(&[2, 3, 1], 8);
        let mut b = WeightsBundle::new();
        b.push_net("actor", &net);
        b.push_vector("mean", &[1.0, 1.0 / 3.0]);
        b.push_scalar("eps", 1e-6);
        let back = WeightsBundle::from_text(&b.to_text()).unwrap();
        assert_eq!(back, b);
        assert_eq!(back.scalar("eps").unwrap(), 1e-6);
        assert!(back.net("critic").is_err());
    }

    proptest! {
        #[test]
        fn serialization_round_trip_is_bit_exact(seed in 0u64..1000, h in 1usize..12, x in proptest::collection::vec(-5.0f64..5.0, 3)) {
            let net = seeded(&[3, h, 2], seed);
            let back = Mlp::from_text(&net.to_text()).unwrap();
            prop_assert_eq!(&back, &net);
            let a = net.forward(&x).unwrap();
            let b = back.forward(&x).unwrap();
            prop_assert_eq!(a.iter().map(|v| v.to_bits()).collect::<Vec<_>>(), b.iter().map(|v| v.to_bits()).collect::<Vec<_>>());
        }

        #[test]
        fn forward_is_finite(seed in 0u64..200, x in proptest::collection::vec(-1e3f64..1e3, 4)) {
            let net = seeded(&[4, 8, 8, 2], seed);
            prop_assert!(net.forward(&x).unwrap().iter().all(|v| v.is_finite()));
        }
    }
}
