#![allow(dead_code)]

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use softood::cotrain::{LabelScheme, TrainConfig};
use softood::data::{Example, Label, Provenance};
use softood::numerics::Vector;

pub fn ind(id: &str, y: usize, features: Vector) -> Example {
    Example {
        id: id.into(),
        features,
        label: Label::Ind(y),
        provenance: Provenance::Ind,
        text: None,
    }
}

pub fn pseudo(id: &str, features: Vector) -> Example {
    Example {
        id: id.into(),
        features,
        label: Label::Pseudo,
        provenance: Provenance::PseudoFm,
        text: None,
    }
}

pub fn gaussian_vec(rng: &mut ChaCha8Rng, dim: usize, scale: f64) -> Vector {
    (0..dim).map(|_| scale * rng.random_range(-1.0..1.0)).collect()
}

pub fn unit_vec(rng: &mut ChaCha8Rng, dim: usize) -> Vector {
    loop {
        let v = gaussian_vec(rng, dim, 1.0);
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 1e-3 {
            return v.into_iter().map(|x| x / n).collect();
        }
    }
}

/// Random point on the simplex with occasional exact zeros.
pub fn random_distribution(rng: &mut ChaCha8Rng, n: usize) -> Vector {
    let mut v: Vector = (0..n)
        .map(|_| if rng.random_bool(0.15) { 0.0 } else { (3.0 * rng.random_range(-1.0..1.0f64)).exp() })
        .collect();
    if v.iter().all(|&x| x == 0.0) {
        v[rng.random_range(0..n)] = 1.0;
    }
    let s: f64 = v.iter().sum();
    v.iter_mut().for_each(|x| *x /= s);
    v
}

/// A tiny model configuration for gradient checks.
pub fn tiny_config(rng: &mut ChaCha8Rng, scheme: LabelScheme) -> TrainConfig {
    let hidden = if rng.random_bool(0.5) { vec![] } else { vec![rng.random_range(3..6)] };
    TrainConfig {
        label_scheme: scheme,
        feature_dim: rng.random_range(3..6),
        encoder_hidden: hidden,
        head_hidden: rng.random_range(3..6),
        proj_dim: rng.random_range(2..5),
        temperature: [0.1, 0.5, 1.0][rng.random_range(0..3)],
        seed: rng.random(),
        ..TrainConfig::default()
    }
}

/// Euclidean projection onto the probability simplex (sort-based).
pub fn project_to_simplex(v: &[f64]) -> Vector {
    let mut u = v.to_vec();
    u.sort_by(|a, b| b.total_cmp(a));
    let mut cum = 0.0;
    let mut theta = 0.0;
    for (i, &ui) in u.iter().enumerate() {
        cum += ui;
        let t = (cum - 1.0) / (i + 1) as f64;
        if ui - t > 0.0 {
            theta = t;
        }
    }
    v.iter().map(|x| (x - theta).max(0.0)).collect()
}

/// Minimizes `α‖l − p‖² + (1 − α) Σ_j a_j ‖l − q_j‖²` over the simplex by
/// projected gradient descent from the uniform distribution.
pub fn smoothing_objective_minimizer(prior: &[f64], neighbors: &[(f64, Vector)], alpha: f64) -> Vector {
    let n = prior.len();
    let mut l = vec![1.0 / n as f64; n];
    for _ in 0..10_000 {
        let mut g: Vector = l.iter().zip(prior).map(|(a, b)| 2.0 * alpha * (a - b)).collect();
        for (a, q) in neighbors {
            for i in 0..n {
                g[i] += 2.0 * (1.0 - alpha) * a * (l[i] - q[i]);
            }
        }
        // Hessian is 2·I (weights sum to one), so 1/4 is a safe step
        let next = project_to_simplex(&l.iter().zip(&g).map(|(a, b)| a - 0.25 * b).collect::<Vec<_>>());
        let moved = next.iter().zip(&l).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        l = next;
        if moved < 1e-15 {
            break;
        }
    }
    l
}

pub fn softplus(w: f64) -> f64 {
    w.exp().ln_1p()
}

pub mod grads {
    use super::*;
    use softood::cotrain::{
        co_loss_frozen, co_targets, ind_cls_loss, DetectorModel, PseudoAux, Stochasticity,
    };
    use softood::detector::{boundary_loss, boundary_loss_grad};
    use softood::embedding::{contrastive_loss, Reduction};
    use softood::numerics::{finite_diff_check, DEFAULT_STEP};
    use softood::rng::seeded;

    /// Small enough that a difference rarely straddles a leaky-ReLU kink.
    pub const MODEL_STEP: f64 = 1e-6;

    /// Worst relative error of the model's accumulated gradient against
    /// central differences of `loss` over every parameter.
    pub fn check_model(model: &DetectorModel, loss: impl Fn(&mut DetectorModel) -> f64) -> f64 {
        let mut m = model.clone();
        m.zero_grads();
        loss(&mut m);
        let analytic = m.flat_grads();
        let point = model.flat_values();
        finite_diff_check(&point, &analytic, MODEL_STEP, |x| {
            let mut probe = model.clone();
            probe.set_flat_values(x).unwrap();
            loss(&mut probe)
        })
    }

    pub struct Case {
        pub model: DetectorModel,
        pub ind: Vec<Example>,
        pub ood: Vec<Example>,
        pub cfg: TrainConfig,
    }

    pub fn random_case(seed: u64, scheme: LabelScheme) -> Case {
        let mut rng = seeded(seed, 0x6AD);
        let cfg = tiny_config(&mut rng, scheme);
        let k = rng.random_range(1..4);
        let dim = rng.random_range(2..5);
        let n = rng.random_range(4..8);
        let mut ind_set: Vec<Example> = (0..n)
            .map(|i| super::ind(&format!("i{i}"), i % k, gaussian_vec(&mut rng, dim, 2.0)))
            .collect();
        // guarantee a positive pair for the contrastive term
        ind_set.push(super::ind("dup", 0, gaussian_vec(&mut rng, dim, 2.0)));
        let ood: Vec<Example> = (0..rng.random_range(1..5))
            .map(|i| super::pseudo(&format!("p{i}"), gaussian_vec(&mut rng, dim, 2.0)))
            .collect();
        let model = DetectorModel::new(&cfg, dim, k + 1).unwrap();
        Case { model, ind: ind_set, ood, cfg }
    }

    pub fn aux_for(case: &Case, rng: &mut ChaCha8Rng) -> PseudoAux {
        let c = case.model.num_classes();
        let mut aux = PseudoAux::default();
        for x in &case.ood {
            aux.smoothed.insert(x.id.clone(), random_distribution(rng, c));
            aux.teacher.insert(x.id.clone(), random_distribution(rng, c - 1));
        }
        aux
    }

    pub fn contrastive(configs: usize) -> Vec<f64> {
        (0..configs as u64)
            .map(|s| {
                let case = random_case(s, LabelScheme::Asoul);
                let batch: Vec<&Example> = case.ind.iter().collect();
                check_model(&case.model, |m| {
                    contrastive_loss(&mut m.net, &batch, Reduction::Mean).unwrap().mean
                })
            })
            .collect()
    }

    pub fn ind_classification(configs: usize) -> Vec<f64> {
        (0..configs as u64)
            .map(|s| {
                let scheme = LabelScheme::ALL[s as usize % LabelScheme::ALL.len()];
                let case = random_case(1000 + s, scheme);
                let batch: Vec<&Example> = case.ind.iter().collect();
                check_model(&case.model, |m| ind_cls_loss(m, &batch, Stochasticity::Off).unwrap())
            })
            .collect()
    }

    /// Co-training loss with targets computed once and held fixed.
    pub fn co_training(configs: usize) -> Vec<f64> {
        (0..configs as u64)
            .map(|s| {
                let scheme = LabelScheme::ALL[s as usize % LabelScheme::ALL.len()];
                let case = random_case(2000 + s, scheme);
                let mut rng = seeded(s, 0xA0C);
                let aux = aux_for(&case, &mut rng);
                let batch: Vec<&Example> = case.ood.iter().collect();
                let targets = co_targets(&case.model, &batch, &aux, &case.cfg, Stochasticity::Off).unwrap();
                check_model(&case.model, |m| {
                    co_loss_frozen(m, &batch, &targets, Stochasticity::Off).unwrap()
                })
            })
            .collect()
    }

    pub fn boundary(configs: usize) -> Vec<f64> {
        (0..configs as u64)
            .map(|s| {
                let mut rng = seeded(s, 0xB0D);
                let slots = rng.random_range(1..5);
                let w: Vec<f64> = (0..slots).map(|_| rng.random_range(-2.0..2.0)).collect();
                let radii: Vec<f64> = w.iter().map(|&v| softplus(v)).collect();
                // keep distances away from the kink at d = b
                let distances: Vec<(usize, f64)> = (0..rng.random_range(3..20))
                    .map(|_| {
                        let c = rng.random_range(0..slots);
                        loop {
                            let d: f64 = rng.random_range(0.0..4.0);
                            if (d - radii[c]).abs() > 1e-2 {
                                return (c, d);
                            }
                        }
                    })
                    .collect();
                let analytic = boundary_loss_grad(&distances, &w);
                finite_diff_check(&w, &analytic, DEFAULT_STEP, |x| {
                    let b: Vec<f64> = x.iter().map(|&v| softplus(v)).collect();
                    boundary_loss(&distances, &b)
                })
            })
            .collect()
    }
}

pub mod smoothing {
    use super::*;
    use softood::embedding::Embedding;
    use softood::graph::{EmbeddingGraph, GraphConfig, PriorLabel};
    use softood::numerics::{dot, one_hot};
    use softood::rng::seeded;

    pub struct Instance {
        pub k: usize,
        pub nodes: usize,
        pub tau: f64,
        pub alpha: f64,
        /// L∞ gap between the closed form and the numeric minimizer.
        pub gap: f64,
    }

    pub fn instance(seed: u64) -> Instance {
        let mut rng = seeded(seed, 0x6E0);
        let k = rng.random_range(1..=5);
        let nodes = rng.random_range(5..=50);
        let tau = [0.1, 1.0][rng.random_range(0..2)];
        let alpha = [0.0, 0.11, 0.5, 1.0][rng.random_range(0..4)];
        let dim = rng.random_range(2..8);
        let z: Vec<Vector> = (0..nodes).map(|_| unit_vec(&mut rng, dim)).collect();
        let hot: Vec<usize> = (0..nodes).map(|_| rng.random_range(0..=k)).collect();
        let cfg = GraphConfig { tau, alpha, include_self: false, top_m: None };
        let graph = EmbeddingGraph::new(
            z.iter()
                .enumerate()
                .map(|(i, z)| Embedding { id: format!("n{i}"), z: z.clone() })
                .collect(),
            hot.iter().map(|&h| PriorLabel { hot: h, num_classes: k + 1 }).collect(),
            cfg,
        )
        .unwrap();
        let q = rng.random_range(0..nodes);
        let closed = graph.graph_smoothed_label(&format!("n{q}")).unwrap();

        let logits: Vec<(usize, f64)> = (0..nodes).filter(|&j| j != q).map(|j| (j, dot(&z[q], &z[j]) / tau)).collect();
        let max = logits.iter().map(|l| l.1).fold(f64::NEG_INFINITY, f64::max);
        let total: f64 = logits.iter().map(|l| (l.1 - max).exp()).sum();
        let neighbors: Vec<(f64, Vector)> = logits
            .iter()
            .map(|&(j, l)| ((l - max).exp() / total, one_hot(k + 1, hot[j])))
            .collect();
        let numeric = smoothing_objective_minimizer(&one_hot(k + 1, hot[q]), &neighbors, alpha);
        let gap = closed.iter().zip(&numeric).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        Instance { k, nodes, tau, alpha, gap }
    }
}

pub mod pipeline {
    use super::*;
    use softood::data::{make_ind_split, synth_clusters, IndSplit, SplitSpec, SynthConfig};
    use softood::oodgen::{generate, PseudoOodConfig};

    /// Synthetic benchmark at its defaults, half the intents IND, feature
    /// mixup pseudo-OOD, and the desk training preset; all seeded by `seed`.
    pub fn prepared(seed: u64, scheme: LabelScheme) -> (IndSplit, Vec<Example>, TrainConfig) {
        let bench = synth_clusters(&SynthConfig { seed, ..SynthConfig::default() }).unwrap();
        let split = make_ind_split(&bench, SplitSpec { ind_ratio: 0.5, seed }).unwrap();
        let pseudo = generate(&split.train, &PseudoOodConfig { seed, ..PseudoOodConfig::default() }).unwrap();
        let cfg = TrainConfig { label_scheme: scheme, seed, ..TrainConfig::desk() };
        (split, pseudo, cfg)
    }
}

pub mod fuzz {
    use super::*;
    use softood::cotrain::{head_predict, make_soft_target, DetectorModel, TargetInputs};
    use softood::data::IntentSpace;
    use softood::detector::avg_predict;
    use softood::embedding::Embedding;
    use softood::graph::{prior_label, EmbeddingGraph, GraphConfig, PriorLabel};
    use softood::numerics::{is_probability_vector, one_hot, Dropout};
    use softood::rng::seeded;

    pub const PROB_TOL: f64 = 1e-9;

    fn check(bad: &mut Vec<String>, what: &str, p: &[f64]) {
        if !is_probability_vector(p, PROB_TOL) {
            bad.push(format!("{what}: {p:?}"));
        }
    }

    /// One randomized case covering prior, smoothed and soft labels of
    /// every scheme, head outputs and the averaged prediction. Returns the
    /// vectors that are not distributions.
    pub fn distribution_case(seed: u64) -> Vec<String> {
        let mut bad = Vec::new();
        let mut rng = seeded(seed, 0);
        let k = rng.random_range(1..=6);
        let c = k + 1;
        let space = IntentSpace::new((0..k).map(|i| format!("intent{i}")).collect()).unwrap();

        // prior labels
        let x = if rng.random_bool(0.5) {
            super::ind("a", rng.random_range(0..k), vec![0.0])
        } else {
            super::pseudo("a", vec![0.0])
        };
        check(&mut bad, "l_p", &prior_label(&x, &space).unwrap().to_vec());

        // graph-smoothed labels on a random graph
        let n = rng.random_range(2..20);
        let dim = rng.random_range(2..6);
        let cfg = GraphConfig {
            tau: [0.01, 0.1, 1.0, 10.0][rng.random_range(0..4)],
            alpha: rng.random_range(0.0..=1.0),
            include_self: rng.random_bool(0.5),
            top_m: if rng.random_bool(0.3) { Some(rng.random_range(1..n)) } else { None },
        };
        let graph = EmbeddingGraph::new(
            (0..n).map(|i| Embedding { id: format!("n{i}"), z: unit_vec(&mut rng, dim) }).collect(),
            (0..n).map(|_| PriorLabel { hot: rng.random_range(0..c), num_classes: c }).collect(),
            cfg,
        ).unwrap();
        for i in 0..n {
            check(&mut bad, "l_g", &graph.graph_smoothed_label(&format!("n{i}")).unwrap());
        }

        // soft targets, every scheme
        let prior = one_hot(c, k);
        let smoothed = random_distribution(&mut rng, c);
        let head = random_distribution(&mut rng, c);
        let teacher = random_distribution(&mut rng, k);
        let beta = rng.random_range(0.0..=1.0);
        let eps = rng.random_range(0.0..=1.0);
        for scheme in LabelScheme::ALL {
            let inputs = TargetInputs { prior: &prior, smoothed: Some(&smoothed), head_pred: &head, teacher: Some(&teacher) };
            check(&mut bad, scheme.as_str(), &make_soft_target(scheme, &inputs, beta, eps).unwrap());
        }

        // head outputs and the averaged prediction, including large inputs
        let scheme = LabelScheme::ALL[rng.random_range(0..LabelScheme::ALL.len())];
        let tcfg = tiny_config(&mut rng, scheme);
        let input_dim = rng.random_range(1..6);
        let model = DetectorModel::new(&tcfg, input_dim, c).unwrap();
        let scale = [1.0, 100.0, 1e4][rng.random_range(0..3)];
        let features = gaussian_vec(&mut rng, input_dim, scale);
        let f = model.encode(&features).unwrap();
        for h in &model.heads {
            check(&mut bad, "head", &head_predict(&h.mlp, &f, Dropout::Off).unwrap());
            check(&mut bad, "head with dropout", &head_predict(&h.mlp, &f, Dropout::Seeded(rng.random())).unwrap());
        }
        check(&mut bad, "average", &avg_predict(&model, &features).unwrap());
        bad
    }
}
