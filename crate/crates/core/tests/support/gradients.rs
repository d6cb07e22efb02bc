//! Finite-difference checks of every graph op, every loss term and the
//! full discriminator and generator objectives, all at f64.

use posegan::losses::{self, LossParts, TermWeights};
use posegan::networks::{ArchConfig, ConvSpec, Discriminator, Generator, Mode, PoseHead};
use posegan::numerics::{grad_check, grad_check_coords, Graph, RngStream, Tensor, Var};
use posegan::Result;

pub const TRIALS: usize = 20;
pub const TOLERANCE: f64 = 1e-4;
const H: f64 = 1e-5;

#[derive(Debug, Clone)]
pub struct Check {
    pub name: String,
    pub trials: usize,
    pub worst: f64,
}

impl Check {
    pub fn passed(&self) -> bool {
        self.trials >= TRIALS && self.worst < TOLERANCE
    }
}

/// `sum(y * w)` with a fixed random `w`, so every output element matters.
fn project(g: &mut Graph<f64>, y: Var, seed: u64) -> Result<Var> {
    let mut rng = RngStream::new(seed);
    let w = g.constant(Tensor::randn(g.shape(y), 1.0, &mut rng));
    let p = g.mul(y, w)?;
    g.sum(p)
}

fn randn(shape: &[usize], rng: &mut RngStream) -> Tensor<f64> {
    Tensor::randn(shape, 1.0, rng)
}

/// Values bounded away from zero, for ops with a kink there.
fn away_from_zero(shape: &[usize], rng: &mut RngStream) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    let v: Vec<f64> = (0..n)
        .map(|_| {
            let m = rng.uniform(0.1, 2.0);
            if rng.below(2) == 0 { m } else { -m }
        })
        .collect();
    Tensor::from_f64(shape, &v).unwrap()
}

fn probabilities(shape: &[usize], rng: &mut RngStream) -> Tensor<f64> {
    Tensor::rand_uniform(shape, 0.05, 0.95, rng)
}

fn row_stochastic(n: usize, k: usize, rng: &mut RngStream) -> Tensor<f64> {
    let mut v = Vec::with_capacity(n * k);
    for _ in 0..n {
        let row: Vec<f64> = (0..k).map(|_| rng.uniform(0.1, 1.0)).collect();
        let s: f64 = row.iter().sum();
        v.extend(row.iter().map(|x| x / s));
    }
    Tensor::from_f64(&[n, k], &v).unwrap()
}

/// Runs `trials` random instances; `instance` returns the worst error of one.
fn run(name: &str, trials: usize, seed: u64, mut instance: impl FnMut(&mut RngStream, u64) -> Result<f64>) -> Check {
    let mut rng = RngStream::new(seed);
    let mut worst = 0.0f64;
    for t in 0..trials {
        let e = instance(&mut rng, seed * 1000 + t as u64).unwrap_or_else(|e| panic!("{name}: {e}"));
        worst = worst.max(e);
    }
    Check { name: name.to_string(), trials, worst }
}

/// Valid `(kernel, stride, pad, size)` conv geometries.
const GEOMETRIES: [(usize, usize, usize, usize); 5] = [(3, 1, 1, 5), (3, 1, 0, 4), (4, 2, 1, 6), (3, 2, 1, 5), (4, 2, 1, 4)];

fn conv_case(rng: &mut RngStream) -> (usize, usize, usize, usize, usize, usize, usize) {
    let (k, s, p, size) = GEOMETRIES[rng.below(GEOMETRIES.len())];
    (1 + rng.below(2), 1 + rng.below(3), 1 + rng.below(3), k, s, p, size)
}

pub fn op_checks() -> Vec<Check> {
    let mut out = Vec::new();

    out.push(run("conv2d/input", TRIALS, 1, |rng, seed| {
        let (n, c, f, k, s, p, size) = conv_case(rng);
        let kernel = randn(&[f, c, k, k], rng);
        grad_check(
            |g, x| {
                let w = g.constant(kernel.clone());
                let y = g.conv2d(x, w, s, p)?;
                project(g, y, seed)
            },
            &randn(&[n, c, size, size], rng),
            H,
        )
    }));
    out.push(run("conv2d/kernel", TRIALS, 2, |rng, seed| {
        let (n, c, f, k, s, p, size) = conv_case(rng);
        let input = randn(&[n, c, size, size], rng);
        grad_check(
            |g, w| {
                let x = g.constant(input.clone());
                let y = g.conv2d(x, w, s, p)?;
                project(g, y, seed)
            },
            &randn(&[f, c, k, k], rng),
            H,
        )
    }));
    out.push(run("conv2d_transpose/input", TRIALS, 3, |rng, seed| {
        let (n, c, f, k, s, p, _) = conv_case(rng);
        let kernel = randn(&[f, c, k, k], rng);
        let size = 2 + rng.below(3);
        grad_check(
            |g, x| {
                let w = g.constant(kernel.clone());
                let y = g.conv2d_transpose(x, w, s, p)?;
                project(g, y, seed)
            },
            &randn(&[n, f, size, size], rng),
            H,
        )
    }));
    out.push(run("conv2d_transpose/kernel", TRIALS, 4, |rng, seed| {
        let (n, c, f, k, s, p, _) = conv_case(rng);
        let size = 2 + rng.below(3);
        let input = randn(&[n, f, size, size], rng);
        grad_check(
            |g, w| {
                let x = g.constant(input.clone());
                let y = g.conv2d_transpose(x, w, s, p)?;
                project(g, y, seed)
            },
            &randn(&[f, c, k, k], rng),
            H,
        )
    }));
    out.push(run("channel_bias/input", TRIALS, 5, |rng, seed| {
        let (n, c, hw) = (1 + rng.below(3), 1 + rng.below(4), 1 + rng.below(4));
        let bias = randn(&[c], rng);
        grad_check(
            |g, x| {
                let b = g.constant(bias.clone());
                let y = g.channel_bias(x, b)?;
                project(g, y, seed)
            },
            &randn(&[n, c, hw, hw], rng),
            H,
        )
    }));
    out.push(run("channel_bias/bias", TRIALS, 6, |rng, seed| {
        let (n, c, hw) = (1 + rng.below(3), 1 + rng.below(4), 1 + rng.below(4));
        let input = randn(&[n, c, hw, hw], rng);
        grad_check(
            |g, b| {
                let x = g.constant(input.clone());
                let y = g.channel_bias(x, b)?;
                project(g, y, seed)
            },
            &randn(&[c], rng),
            H,
        )
    }));
    for (slot, seed0) in [(0usize, 7u64), (1, 8), (2, 9)] {
        let name = ["linear/input", "linear/weight", "linear/bias"][slot];
        out.push(run(name, TRIALS, seed0, |rng, seed| {
            let (n, i, o) = (1 + rng.below(4), 1 + rng.below(5), 1 + rng.below(5));
            let xs = randn(&[n, i], rng);
            let ws = randn(&[o, i], rng);
            let bs = randn(&[o], rng);
            let point = [&xs, &ws, &bs][slot].clone();
            grad_check(
                |g, v| {
                    let x = if slot == 0 { v } else { g.constant(xs.clone()) };
                    let w = if slot == 1 { v } else { g.constant(ws.clone()) };
                    let b = if slot == 2 { v } else { g.constant(bs.clone()) };
                    let y = g.linear(x, w, Some(b))?;
                    project(g, y, seed)
                },
                &point,
                H,
            )
        }));
    }
    out.push(run("linear/no-bias", TRIALS, 10, |rng, seed| {
        let (n, i, o) = (1 + rng.below(4), 1 + rng.below(5), 1 + rng.below(5));
        let ws = randn(&[o, i], rng);
        grad_check(
            |g, x| {
                let w = g.constant(ws.clone());
                let y = g.linear(x, w, None)?;
                project(g, y, seed)
            },
            &randn(&[n, i], rng),
            H,
        )
    }));
    for (slot, seed0) in [(0usize, 11u64), (1, 12), (2, 13)] {
        let name = ["batch_norm/input", "batch_norm/gamma", "batch_norm/beta"][slot];
        out.push(run(name, TRIALS, seed0, |rng, seed| {
            let (n, c, hw) = (2 + rng.below(3), 1 + rng.below(3), 1 + rng.below(3));
            let xs = randn(&[n, c, hw, hw], rng);
            let gs = Tensor::rand_uniform(&[c], 0.5, 1.5, rng);
            let bs = randn(&[c], rng);
            let point = [&xs, &gs, &bs][slot].clone();
            grad_check(
                |g, v| {
                    let x = if slot == 0 { v } else { g.constant(xs.clone()) };
                    let ga = if slot == 1 { v } else { g.constant(gs.clone()) };
                    let be = if slot == 2 { v } else { g.constant(bs.clone()) };
                    let (y, _) = g.batch_norm(x, ga, be, None, 1e-5)?;
                    project(g, y, seed)
                },
                &point,
                H,
            )
        }));
    }
    out.push(run("batch_norm/running", TRIALS, 14, |rng, seed| {
        let (n, c) = (1 + rng.below(3), 1 + rng.below(3));
        let gs = Tensor::rand_uniform(&[c], 0.5, 1.5, rng);
        let bs = randn(&[c], rng);
        let mean: Vec<f64> = (0..c).map(|_| rng.normal()).collect();
        let var: Vec<f64> = (0..c).map(|_| rng.uniform(0.5, 2.0)).collect();
        grad_check(
            |g, x| {
                let ga = g.constant(gs.clone());
                let be = g.constant(bs.clone());
                let (y, _) = g.batch_norm(x, ga, be, Some((&mean, &var)), 1e-5)?;
                project(g, y, seed)
            },
            &randn(&[n, c, 2, 2], rng),
            H,
        )
    }));

    type Unary = fn(&mut Graph<f64>, Var) -> Result<Var>;
    let unary: [(&str, Unary, bool); 11] = [
        ("elu", |g, x| g.elu(x, 1.0), true),
        ("tanh", |g, x| g.tanh(x), false),
        ("sigmoid", |g, x| g.sigmoid(x), false),
        ("softmax", |g, x| g.softmax(x), false),
        ("avg_pool", |g, x| {
            let len = g.value(x).len();
            let y = g.reshape(x, &[1, len / 4, 2, 2])?;
            g.avg_pool(y, 2)
        }, false),
        ("reshape", |g, x| {
            let n = g.value(x).len();
            g.reshape(x, &[n])
        }, false),
        ("scale", |g, x| g.scale(x, -1.7), false),
        ("add_scalar", |g, x| g.add_scalar(x, 0.3), false),
        ("abs", |g, x| g.abs(x), true),
        ("square", |g, x| g.square(x), false),
        ("log_eps", |g, x| {
            let s = g.square(x)?;
            g.log_eps(s, 1e-7)
        }, true),
    ];
    for (i, (name, f, kink)) in unary.into_iter().enumerate() {
        out.push(run(name, TRIALS, 20 + i as u64, |rng, seed| {
            let (n, k) = (1 + rng.below(3), 4 * (1 + rng.below(3)));
            let point = if kink { away_from_zero(&[n, k], rng) } else { randn(&[n, k], rng) };
            grad_check(
                |g, x| {
                    let y = f(g, x)?;
                    project(g, y, seed)
                },
                &point,
                H,
            )
        }));
    }
    out.push(run("mean", TRIALS, 40, |rng, _| {
        let n = 1 + rng.below(10);
        grad_check(
            |g, x| {
                let s = g.square(x)?;
                g.mean(s)
            },
            &randn(&[n], rng),
            H,
        )
    }));
    out.push(run("sum", TRIALS, 41, |rng, _| {
        let n = 1 + rng.below(10);
        grad_check(
            |g, x| {
                let s = g.square(x)?;
                g.sum(s)
            },
            &randn(&[n], rng),
            H,
        )
    }));
    out.push(run("gather", TRIALS, 42, |rng, seed| {
        let (n, k) = (1 + rng.below(4), 1 + rng.below(5));
        let idx: Vec<usize> = (0..n).map(|_| rng.below(k)).collect();
        grad_check(
            |g, x| {
                let y = g.gather(x, &idx)?;
                project(g, y, seed)
            },
            &randn(&[n, k], rng),
            H,
        )
    }));
    out.push(run("concat", TRIALS, 43, |rng, seed| {
        let (n, a, b) = (1 + rng.below(3), 1 + rng.below(4), 1 + rng.below(4));
        let other = randn(&[n, b], rng);
        grad_check(
            |g, x| {
                let o = g.constant(other.clone());
                let y = g.concat(&[o, x, o])?;
                project(g, y, seed)
            },
            &randn(&[n, a], rng),
            H,
        )
    }));
    type Binary = fn(&mut Graph<f64>, Var, Var) -> Result<Var>;
    let binary: [(&str, Binary); 3] = [("add", |g, a, b| g.add(a, b)), ("sub", |g, a, b| g.sub(a, b)), ("mul", |g, a, b| g.mul(a, b))];
    for (i, (name, f)) in binary.into_iter().enumerate() {
        for side in 0..2 {
            let label = format!("{name}/{}", ["left", "right"][side]);
            out.push(run(&label, TRIALS, 50 + 2 * i as u64 + side as u64, |rng, seed| {
                let shape = [1 + rng.below(3), 1 + rng.below(4)];
                let other = randn(&shape, rng);
                grad_check(
                    |g, x| {
                        let o = g.constant(other.clone());
                        let y = if side == 0 { f(g, x, o)? } else { f(g, o, x)? };
                        project(g, y, seed)
                    },
                    &randn(&shape, rng),
                    H,
                )
            }));
        }
    }
    out
}

pub fn loss_checks() -> Vec<Check> {
    let mut out = Vec::new();
    for eta in [1u32, 2] {
        for side in 0..2 {
            let name = format!("autoencoder_loss/eta{eta}/{}", ["x", "recon"][side]);
            out.push(run(&name, TRIALS, 100 + 2 * eta as u64 + side as u64, |rng, _| {
                let shape = [1 + rng.below(2), 1 + rng.below(3), 2, 2];
                let other = randn(&shape, rng);
                // keep every residual away from the kink of |.|
                let offset = away_from_zero(&shape, rng);
                let point = other.zip_map(&offset, |a, b| a + b).unwrap();
                grad_check(
                    |g, x| {
                        let o = g.constant(other.clone());
                        if side == 0 { losses::autoencoder_loss(g, x, o, eta) } else { losses::autoencoder_loss(g, o, x, eta) }
                    },
                    &point,
                    H,
                )
            }));
        }
    }
    for side in 0..2 {
        let name = format!("d_adv_loss/{}", ["real", "fake"][side]);
        out.push(run(&name, TRIALS, 110 + side as u64, |rng, _| {
            let n = 1 + rng.below(5);
            let other = probabilities(&[n], rng);
            grad_check(
                |g, x| {
                    let o = g.constant(other.clone());
                    if side == 0 { losses::d_adv_loss(g, x, o) } else { losses::d_adv_loss(g, o, x) }
                },
                &probabilities(&[n], rng),
                H,
            )
        }));
    }
    out.push(run("g_adv_loss", TRIALS, 112, |rng, _| {
        let n = 1 + rng.below(5);
        grad_check(|g, x| losses::g_adv_loss(g, x), &probabilities(&[n], rng), H)
    }));
    out.push(run("d_id_loss", TRIALS, 113, |rng, _| {
        let (n, k) = (1 + rng.below(4), 2 + rng.below(5));
        let labels: Vec<usize> = (0..n).map(|_| rng.below(k)).collect();
        grad_check(|g, x| losses::d_id_loss(g, x, &labels), &row_stochastic(n, k, rng), H)
    }));
    out.push(run("classification_loss/softmax", TRIALS, 114, |rng, _| {
        let (n, k) = (1 + rng.below(4), 2 + rng.below(8));
        let labels: Vec<usize> = (0..n).map(|_| rng.below(k)).collect();
        grad_check(
            |g, x| {
                let p = g.softmax(x)?;
                losses::classification_loss(g, p, &labels)
            },
            &randn(&[n, k], rng),
            H,
        )
    }));
    for side in 0..2 {
        let name = format!("pose_regression_loss/{}", ["estimate", "target"][side]);
        out.push(run(&name, TRIALS, 115 + side as u64, |rng, _| {
            let n = 1 + rng.below(6);
            let other = randn(&[n], rng);
            let point = other.zip_map(&away_from_zero(&[n], rng), |a, b| a + b).unwrap();
            grad_check(
                |g, x| {
                    let o = g.constant(other.clone());
                    if side == 0 { losses::pose_regression_loss(g, x, o) } else { losses::pose_regression_loss(g, o, x) }
                },
                &point,
                H,
            )
        }));
    }
    for side in 0..2 {
        let name = format!("d_pixel_loss/{}", ["real", "fake"][side]);
        out.push(run(&name, TRIALS, 117 + side as u64, |rng, _| {
            let k = rng.uniform(0.0, 1.0);
            let other = Tensor::scalar(rng.uniform(0.0, 2.0));
            grad_check(
                |g, x| {
                    let o = g.constant(other.clone());
                    let s = g.square(x)?;
                    if side == 0 { losses::d_pixel_loss(g, s, o, k) } else { losses::d_pixel_loss(g, o, s, k) }
                },
                &randn(&[1], rng),
                H,
            )
        }));
    }
    out.push(run("g_pixel_loss", TRIALS, 119, |rng, _| {
        let shape = [1, 1 + rng.below(3), 2, 2];
        let target = randn(&shape, rng);
        let point = target.zip_map(&away_from_zero(&shape, rng), |a, b| a + b).unwrap();
        grad_check(
            |g, x| {
                let t = g.constant(target.clone());
                let l = losses::autoencoder_loss(g, x, t, 1)?;
                Ok(losses::g_pixel_loss(l))
            },
            &point,
            H,
        )
    }));
    out.push(run("weighted_total", TRIALS, 120, |rng, _| {
        let w = TermWeights {
            adversarial: rng.uniform(0.0, 2.0),
            identity: rng.uniform(0.0, 2.0),
            pose: rng.uniform(0.0, 2.0),
            pixel: rng.uniform(0.0, 20.0),
        };
        grad_check(
            |g, x| {
                let terms: Vec<Var> = (0..4).map(|i| g.gather(x, &[i])).collect::<Result<_>>()?;
                let sq: Vec<Var> = terms.into_iter().map(|t| g.square(t)).collect::<Result<_>>()?;
                let parts = LossParts { adversarial: sq[0], identity: sq[1], pose: sq[2], pixel: sq[3] };
                losses::weighted_total(g, &parts, &w)
            },
            &randn(&[1, 4], rng),
            H,
        )
    }));
    out
}

fn tiny_arch() -> ArchConfig {
    ArchConfig {
        image_size: 8,
        feature_dim: 3,
        noise_dim: 2,
        code_dim: 3,
        encoder: vec![ConvSpec::new(3, 4, 2, 1), ConvSpec::new(3, 3, 1, 1)],
        init_std: 0.4,
        ..ArchConfig::desk()
    }
}

/// Probes up to `per_tensor` coordinates of every parameter tensor.
fn coords(len: usize, per_tensor: usize, rng: &mut RngStream) -> Vec<usize> {
    if len <= per_tensor {
        return (0..len).collect();
    }
    (0..per_tensor).map(|_| rng.below(len)).collect()
}

/// The full discriminator objective on a 2-sample batch (real plus generated
/// images), differentiated with respect to every parameter tensor.
pub fn discriminator_loss_check(trials: usize) -> Check {
    run("discriminator objective", trials, 200, |rng, _| {
        let arch = tiny_arch();
        let mut init = rng.derive(1);
        let d: Discriminator<f64> = Discriminator::init(&arch, 3, PoseHead::Regression, &mut init)?;
        let real = Tensor::rand_uniform(&[2, 3, 8, 8], -1.0, 1.0, rng);
        let fake = Tensor::rand_uniform(&[2, 3, 8, 8], -1.0, 1.0, rng);
        let labels = vec![rng.below(3), rng.below(3)];
        let codes = Tensor::from_f64(&[2], &[rng.uniform(-17.0, 17.0), rng.uniform(-17.0, 17.0)])?;
        let k = rng.uniform(0.0, 1.0);
        let w = TermWeights::default();
        let mut worst = 0.0f64;
        for i in 0..d.params.len() {
            let probe = coords(d.params.tensors[i].len(), 4, rng);
            let e = grad_check_coords(
                |g, x| {
                    let vars: Vec<Var> = (0..d.params.len())
                        .map(|j| if j == i { x } else { g.constant(d.params.tensors[j].clone()) })
                        .collect();
                    let xr = g.constant(real.clone());
                    let xf = g.constant(fake.clone());
                    let r = d.forward(g, &vars, xr, Mode::Train)?;
                    let f = d.forward(g, &vars, xf, Mode::Train)?;
                    let adversarial = losses::d_adv_loss(g, r.adversarial, f.adversarial)?;
                    let identity = losses::d_id_loss(g, r.identity, &labels)?;
                    let t = g.constant(codes.clone());
                    let pose = losses::pose_regression_loss(g, r.pose, t)?;
                    let l_real = losses::autoencoder_loss(g, xr, r.reconstruction, 1)?;
                    let l_fake = losses::autoencoder_loss(g, xf, f.reconstruction, 1)?;
                    let pixel = losses::d_pixel_loss(g, l_real, l_fake, k)?;
                    losses::weighted_total(g, &LossParts { adversarial, identity, pose, pixel }, &w)
                },
                &d.params.tensors[i],
                H,
                Some(&probe),
            )?;
            worst = worst.max(e);
        }
        Ok(worst)
    })
}

/// The full generator objective through a fixed discriminator.
pub fn generator_loss_check(trials: usize) -> Check {
    run("generator objective", trials, 201, |rng, _| {
        let arch = tiny_arch();
        let mut init = rng.derive(2);
        let gen: Generator<f64> = Generator::init(&arch, &mut init)?;
        let d: Discriminator<f64> = Discriminator::init(&arch, 3, PoseHead::Classification(5), &mut init)?;
        let images = Tensor::rand_uniform(&[2, 3, 8, 8], -1.0, 1.0, rng);
        let z = Tensor::randn(&[2, 2], 1.0, rng);
        let c = [rng.uniform(-17.0, 17.0), rng.uniform(-17.0, 17.0)];
        let classes: Vec<usize> = c.iter().map(|&v| losses::pose_class(v, 17.0, 5)).collect();
        let labels = vec![rng.below(3), rng.below(3)];
        let w = TermWeights::default();
        let mut worst = 0.0f64;
        for i in 0..gen.params.len() {
            let probe = coords(gen.params.tensors[i].len(), 4, rng);
            let e = grad_check_coords(
                |g, x| {
                    let gv: Vec<Var> = (0..gen.params.len())
                        .map(|j| if j == i { x } else { g.constant(gen.params.tensors[j].clone()) })
                        .collect();
                    let dv = d.params.bind(g, false);
                    let xi = g.constant(images.clone());
                    let cv = g.constant(Tensor::from_f64(&[2, 1], &c)?);
                    let zv = g.constant(z.clone());
                    let out = gen.forward(g, &gv, xi, cv, zv, Mode::Train)?;
                    let dout = d.forward(g, &dv, out.images, Mode::Train)?;
                    let adversarial = losses::g_adv_loss(g, dout.adversarial)?;
                    let identity = losses::d_id_loss(g, dout.identity, &labels)?;
                    let pose = losses::classification_loss(g, dout.pose, &classes)?;
                    let l_fake = losses::autoencoder_loss(g, out.images, dout.reconstruction, 2)?;
                    let pixel = losses::g_pixel_loss(l_fake);
                    losses::weighted_total(g, &LossParts { adversarial, identity, pose, pixel }, &w)
                },
                &gen.params.tensors[i],
                H,
                Some(&probe),
            )?;
            worst = worst.max(e);
        }
        Ok(worst)
    })
}

pub fn all_checks() -> Vec<Check> {
    let mut v = op_checks();
    v.extend(loss_checks());
    v.push(discriminator_loss_check(TRIALS));
    v.push(generator_loss_check(TRIALS));
    v
}
