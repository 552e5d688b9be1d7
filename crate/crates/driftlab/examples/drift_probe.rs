//! Diagnostic: how well do translated prototypes track the true class
//! means across a task stream, compared with stale and freshly
//! recomputed ones?
//!
//! For each seed the embedding trajectory is trained once and the
//! per-boundary drift is probed three ways: stale prototypes (never
//! translated), a closed-form affine transport fitted on current-task
//! rows only (the signal a transition can legally see), and the same
//! fit on all tasks' rows (information ceiling). Old-task errors are
//! then decomposed by where the wrong prediction came from: a class of
//! the newest task, a class of a different old task, or a sibling
//! class in the sample's own task.

use driftlab::embedding::{train_task, EmbeddingModel, MiningPolicy, TrainConfig};
use driftlab::eval::ncm_classify;
use driftlab::regularizer::RegKind;
use driftlab::seeds::{rng, Stream};
use driftlab::stream::{make_synthetic_stream, Sample, TaskStream};
use driftlab::tensor::Tensor;
use driftlab::translation::{
    compute_prototypes, train_transition, update_memory, PrototypeMemory, TransitionConfig,
};

fn old_task_accuracy(
    stream: &TaskStream,
    model: &EmbeddingModel<f64>,
    memory: &PrototypeMemory<f64>,
    upto: usize,
) -> f64 {
    let mut hit = 0usize;
    let mut total = 0usize;
    for t in 0..upto {
        let task = stream.task(t);
        let samples: Vec<&Sample> = task.test().iter().collect();
        let z = model.embed_samples(&samples).unwrap();
        let preds = ncm_classify(&z, memory).unwrap();
        hit += preds
            .iter()
            .zip(&samples)
            .filter(|(p, s)| **p == s.label)
            .count();
        total += samples.len();
    }
    hit as f64 / total as f64
}

/// Fractions of old-task test errors whose predicted class lives in
/// the newest task, in some other old task, or in the sample's own
/// task. Returned as (new, cross, within) fractions of all samples.
fn error_split(
    stream: &TaskStream,
    model: &EmbeddingModel<f64>,
    memory: &PrototypeMemory<f64>,
    upto: usize,
) -> (f64, f64, f64) {
    let task_of = |class: usize| -> usize {
        for t in 0..stream.tasks().len() {
            if stream.task(t).classes().contains(&class) {
                return t;
            }
        }
        unreachable!("class {class} not in any task")
    };
    let mut new = 0usize;
    let mut cross = 0usize;
    let mut within = 0usize;
    let mut total = 0usize;
    for t in 0..upto {
        let task = stream.task(t);
        let samples: Vec<&Sample> = task.test().iter().collect();
        let z = model.embed_samples(&samples).unwrap();
        let preds = ncm_classify(&z, memory).unwrap();
        for (p, s) in preds.iter().zip(&samples) {
            total += 1;
            if *p == s.label {
                continue;
            }
            let pt = task_of(*p);
            if pt == upto {
                new += 1;
            } else if pt == t {
                within += 1;
            } else {
                cross += 1;
            }
        }
    }
    let n = total as f64;
    (new as f64 / n, cross as f64 / n, within as f64 / n)
}

/// Least-squares affine fit z_new ~ z_old + A z_old + b over rows, via
/// normal equations on the augmented system; returns (A, b).
fn ls_affine(z_old: &Tensor<f64>, z_new: &Tensor<f64>) -> (Vec<Vec<f64>>, Vec<f64>) {
    let (n, d) = (z_old.rows(), z_old.cols());
    let m = d + 1;
    // Normal matrix over augmented inputs [z, 1]; target is the residual.
    let mut g = vec![vec![0.0; m]; m];
    let mut rhs = vec![vec![0.0; d]; m];
    for i in 0..n {
        let mut x = z_old.row(i).to_vec();
        x.push(1.0);
        let y: Vec<f64> = z_new
            .row(i)
            .iter()
            .zip(z_old.row(i))
            .map(|(a, b)| a - b)
            .collect();
        for r in 0..m {
            for c in 0..m {
                g[r][c] += x[r] * x[c];
            }
            for c in 0..d {
                rhs[r][c] += x[r] * y[c];
            }
        }
    }
    // Tiny ridge keeps the solve well-posed when rows are degenerate.
    for r in 0..m {
        g[r][r] += 1e-9;
    }
    // Gaussian elimination with partial pivoting, d right-hand sides.
    for col in 0..m {
        let piv = (col..m)
            .max_by(|&a, &b| g[a][col].abs().partial_cmp(&g[b][col].abs()).unwrap())
            .unwrap();
        g.swap(col, piv);
        rhs.swap(col, piv);
        let p = g[col][col];
        for r in 0..m {
            if r == col {
                continue;
            }
            let f = g[r][col] / p;
            for c in 0..m {
                g[r][c] -= f * g[col][c];
            }
            for c in 0..d {
                rhs[r][c] -= f * rhs[col][c];
            }
        }
    }
    let mut a = vec![vec![0.0; d]; d];
    let mut b = vec![0.0; d];
    for out in 0..d {
        for inp in 0..d {
            a[out][inp] = rhs[inp][out] / g[inp][inp];
        }
        b[out] = rhs[d][out] / g[d][d];
    }
    (a, b)
}

fn apply_affine(a: &[Vec<f64>], b: &[f64], v: &Tensor<f64>) -> Tensor<f64> {
    let d = v.len();
    let mut out = vec![0.0; d];
    for (r, o) in out.iter_mut().enumerate() {
        *o = v.data()[r] + b[r];
        for c in 0..d {
            *o += a[r][c] * v.data()[c];
        }
    }
    Tensor::from_vec(&[d], out).unwrap()
}

fn main() {
    // Optional args: margin lr epochs embed_dim hidden...
    let args: Vec<f64> = std::env::args()
        .skip(1)
        .map(|a| a.parse().expect("numeric args"))
        .collect();
    let (tasks, classes, samples, dim, spread) = (5, 4, 50, 16, 0.15);
    let embed_dim = *args.get(3).unwrap_or(&16.0) as usize;
    let hidden: Vec<usize> = args.iter().skip(4).map(|&h| h as usize).collect();
    let tcfg = TrainConfig {
        epochs: *args.get(2).unwrap_or(&40.0) as usize,
        batch_size: 32,
        lr: *args.get(1).unwrap_or(&0.004),
        margin: *args.get(0).unwrap_or(&2.0),
        regularizer: RegKind::None,
        gamma_reg: 0.0,
        mining: MiningPolicy::AllValid,
    };
    println!(
        "margin {} lr {} epochs {} embed {} hidden {:?}",
        tcfg.margin, tcfg.lr, tcfg.epochs, embed_dim, hidden
    );

    // Candidate transition schedules, replayed with the real trainer.
    let schedules: Vec<(f64, usize, usize)> = vec![
        (0.02, 200, 32),
        (0.05, 400, 32),
        (0.02, 600, 200),
        (0.05, 600, 200),
    ];
    let mut agg = [[0.0f64; 4]; 4];
    let mut agg_split = [[0.0f64; 3]; 2];
    let mut agg_sched = vec![[0.0f64; 4]; schedules.len()];
    for seed in 1u64..=5 {
        let stream = make_synthetic_stream(tasks, classes, samples, dim, spread, seed).unwrap();
        let mut dims = vec![dim];
        dims.extend(&hidden);
        dims.push(embed_dim);
        let mut r = rng(seed, Stream::EmbedInit, 0);
        let mut model = EmbeddingModel::<f64>::new(&dims, false, &mut r).unwrap();
        let mut models: Vec<EmbeddingModel<f64>> = Vec::new();
        for t in 0..tasks {
            train_task(&mut model, stream.task(t), &tcfg, None, None, seed).unwrap();
            models.push(model.clone());
        }

        println!("seed {seed}");
        println!("  k  stale    oracle   ls-cur   ls-all");
        let mut stale = PrototypeMemory::new();
        let mut ls_cur_mem = PrototypeMemory::new();
        let mut ls_all_mem = PrototypeMemory::new();
        for (c, u) in compute_prototypes(&models[0], stream.task(0)).unwrap() {
            stale.insert(c, u.clone(), 0).unwrap();
            ls_cur_mem.insert(c, u.clone(), 0).unwrap();
            ls_all_mem.insert(c, u, 0).unwrap();
        }
        for k in 1..tasks {
            let mut oracle = PrototypeMemory::new();
            for t in 0..=k {
                for (c, u) in compute_prototypes(&models[k], stream.task(t)).unwrap() {
                    oracle.insert(c, u, t).unwrap();
                }
            }

            let embed_pair = |tasks_in: &[usize]| {
                let mut rows_old = Vec::new();
                let mut rows_new = Vec::new();
                let mut n = 0usize;
                for &t in tasks_in {
                    let samples: Vec<&Sample> = stream.task(t).train().iter().collect();
                    let zo = models[k - 1].embed_samples(&samples).unwrap();
                    let zn = models[k].embed_samples(&samples).unwrap();
                    rows_old.extend_from_slice(zo.data());
                    rows_new.extend_from_slice(zn.data());
                    n += samples.len();
                }
                (
                    Tensor::from_vec(&[n, embed_dim], rows_old).unwrap(),
                    Tensor::from_vec(&[n, embed_dim], rows_new).unwrap(),
                )
            };
            let (zo, zn) = embed_pair(&[k]);
            let (a_cur, b_cur) = ls_affine(&zo, &zn);
            let znorm = (0..zo.rows())
                .map(|i| zo.row(i).iter().map(|v| v * v).sum::<f64>().sqrt())
                .sum::<f64>()
                / zo.rows() as f64;
            let amax = a_cur
                .iter()
                .flatten()
                .fold(0.0f64, |m, v| m.max(v.abs()));
            let bmax = b_cur.iter().fold(0.0f64, |m, v| m.max(v.abs()));
            println!("    k={k} |z| {znorm:.2}  maxA {amax:.3}  maxb {bmax:.3}");
            let all_tasks: Vec<usize> = (0..=k).collect();
            let (zo, zn) = embed_pair(&all_tasks);
            let (a_all, b_all) = ls_affine(&zo, &zn);

            let advance = |mem: &mut PrototypeMemory<f64>, a: &[Vec<f64>], b: &[f64]| {
                let mut next = PrototypeMemory::new();
                for (c, e) in mem.iter() {
                    next.insert(c, apply_affine(a, b, &e.value), e.origin_task)
                        .unwrap();
                }
                for (c, u) in compute_prototypes(&models[k], stream.task(k)).unwrap() {
                    next.insert(c, u, k).unwrap();
                }
                *mem = next;
            };
            advance(&mut ls_cur_mem, &a_cur, &b_cur);
            advance(&mut ls_all_mem, &a_all, &b_all);
            for (c, u) in compute_prototypes(&models[k], stream.task(k)).unwrap() {
                stale.insert(c, u, k).unwrap();
            }

            let sa = old_task_accuracy(&stream, &models[k], &stale, k);
            let oa = old_task_accuracy(&stream, &models[k], &oracle, k);
            let ca = old_task_accuracy(&stream, &models[k], &ls_cur_mem, k);
            let aa = old_task_accuracy(&stream, &models[k], &ls_all_mem, k);
            println!("  {k}  {sa:.4}   {oa:.4}   {ca:.4}   {aa:.4}");
            agg[k - 1][0] += sa / 5.0;
            agg[k - 1][1] += oa / 5.0;
            agg[k - 1][2] += ca / 5.0;
            agg[k - 1][3] += aa / 5.0;

            if k == tasks - 1 {
                let (sn, sc, sw) = error_split(&stream, &models[k], &stale, k);
                let (on, oc, ow) = error_split(&stream, &models[k], &oracle, k);
                println!("  err split (new/cross/within)");
                println!("    stale   {sn:.4} {sc:.4} {sw:.4}");
                println!("    oracle  {on:.4} {oc:.4} {ow:.4}");
                for (slot, v) in [sn, sc, sw].iter().enumerate() {
                    agg_split[0][slot] += v / 5.0;
                }
                for (slot, v) in [on, oc, ow].iter().enumerate() {
                    agg_split[1][slot] += v / 5.0;
                }
            }
        }

        for (si, &(lr, epochs, batch)) in schedules.iter().enumerate() {
            let cfg = TransitionConfig {
                epochs,
                batch_size: batch,
                lr,
                hidden_dim: 0,
                gamma_tri: 0.0,
                beta: 0.0,
                delta: 0.0,
                align_weight: 1.0,
                margin: 0.3,
                chain_prototypes: true,
                freeze_cur: true,
                weight_decay: 0.0,
            };
            let mut memory = PrototypeMemory::new();
            for (c, u) in compute_prototypes(&models[0], stream.task(0)).unwrap() {
                memory.insert(c, u, 0).unwrap();
            }
            print!("  pair lr {lr} epochs {epochs} batch {batch}:");
            for k in 1..tasks {
                let pair = train_transition(
                    &models[k - 1],
                    &models[k],
                    stream.task(k),
                    &memory,
                    &cfg,
                    seed,
                    k as u64,
                )
                .unwrap();
                let new_protos = compute_prototypes(&models[k], stream.task(k)).unwrap();
                update_memory(&mut memory, &pair, new_protos, k, cfg.chain_prototypes).unwrap();
                let acc = old_task_accuracy(&stream, &models[k], &memory, k);
                print!("  {acc:.4}");
                agg_sched[si][k - 1] += acc / 5.0;
            }
            println!();
        }
    }

    println!("mean over seeds");
    println!("  k  stale    oracle   ls-cur   ls-all");
    for (k, row) in agg.iter().enumerate() {
        println!(
            "  {}  {:.4}   {:.4}   {:.4}   {:.4}",
            k + 1,
            row[0],
            row[1],
            row[2],
            row[3]
        );
    }
    println!("  final-hop err split (new/cross/within)");
    println!(
        "    stale   {:.4} {:.4} {:.4}",
        agg_split[0][0], agg_split[0][1], agg_split[0][2]
    );
    println!(
        "    oracle  {:.4} {:.4} {:.4}",
        agg_split[1][0], agg_split[1][1], agg_split[1][2]
    );
    for (si, &(lr, epochs, batch)) in schedules.iter().enumerate() {
        println!(
            "  pair lr {lr} epochs {epochs} batch {batch}:  {}",
            agg_sched[si]
                .iter()
                .map(|v| format!("{v:.4}"))
                .collect::<Vec<_>>()
                .join("  ")
        );
    }
}
