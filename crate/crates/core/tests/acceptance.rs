//! End-to-end acceptance checks. Prints one PASS/FAIL line per criterion and
//! exits non-zero if any fails.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use sigprobe::data::Dataset;
use sigprobe::evaluate::{rrc, AccuracyMatrix, NoiseSweep, RrcConvention, RrcMatrix};
use sigprobe::fca::{
    concept_lattice, enumerate_concepts, export_dot, is_total_order, threshold_bands, threshold_context,
    ConceptLattice, FormalConcept, FormalContext,
};
use sigprobe::finetune::{finetune, CoupledModel, FinetuneConfig, UpdateTarget};
use sigprobe::infometrics::{nmi, NmiMode, NmiReport};
use sigprobe::modelzoo::{
    build_autoencoder, build_classifier, pool_with_indices, unpool_with_indices, ArchitectureSpec, AutoencoderModel,
    Family,
};
use sigprobe::orchestrator::{load_manifest, run_pipeline};
use sigprobe::pretrain::plateau_schedule;
use sigprobe::Tensor;

const RRC_TOL: f64 = 5e-4;
const FD_REL_TOL: f64 = 1e-4;
const FD_EPS: f64 = 1e-6;
const NMI_SYM_TOL: f64 = 1e-12;
const NMI_SELF_TOL: f64 = 1e-9;
const FCA_CONTEXTS: usize = 200;
const FINETUNE_STEPS: u64 = 500;
const NOISE_LEVELS: [f64; 2] = [0.1, 0.2];
const CROSS_ACCURACY: &str = include_str!("fixtures/cross_accuracy.csv");

type Outcome = Result<String, String>;

fn check(cond: bool, msg: impl Into<String>) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg.into())
    }
}

fn within(elapsed: Duration, limit_s: f64) -> Result<(), String> {
    check(elapsed.as_secs_f64() < limit_s, format!("took {:.1}s, limit {limit_s}s", elapsed.as_secs_f64()))
}

fn fixture_rrc() -> RrcMatrix {
    let m = AccuracyMatrix::read_csv(CROSS_ACCURACY.as_bytes()).unwrap();
    rrc(&m, RrcConvention::Diagonal).unwrap()
}

fn crit_rrc_fixture() -> Outcome {
    let t = Instant::now();
    let r = fixture_rrc();
    let get = |ae: &str, c: &str| r.get(ae, c).ok_or(format!("missing {ae}->{c}"));
    let expected = [("A_A", "L", 0.0606), ("A_L", "A", 0.8831), ("A_L", "R", 1.3576)];
    let mut seen = Vec::new();
    for (ae, c, want) in expected {
        let v = get(ae, c)?;
        check((v - want).abs() <= RRC_TOL, format!("{ae}->{c} = {v:.5}, want {want}"))?;
        seen.push(format!("{ae}->{c}={v:.4}"));
    }
    for c in &r.cols {
        check(get(&format!("A_{c}"), c)? == 1.0, format!("diagonal A_{c} not exactly 1"))?;
    }
    within(t.elapsed(), 1.0)?;
    Ok(seen.join(" "))
}

fn brute_concepts(ctx: &FormalContext) -> BTreeSet<(u64, u64)> {
    let (g, m) = (ctx.objects.len(), ctx.attributes.len());
    let mut out = BTreeSet::new();
    for a in 0u64..1 << g {
        for b in 0u64..1 << m {
            let a_prime = (0..m).filter(|&j| (0..g).all(|i| a >> i & 1 == 0 || ctx.has(i, j))).fold(0, |s, j| s | 1 << j);
            let b_prime = (0..g).filter(|&i| (0..m).all(|j| b >> j & 1 == 0 || ctx.has(i, j))).fold(0, |s, i| s | 1 << i);
            if a_prime == b && b_prime == a {
                out.insert((a, b));
            }
        }
    }
    out
}

fn random_context(rng: &mut impl Rng, g: usize, m: usize, density: f64) -> FormalContext {
    let rows: Vec<Vec<bool>> = (0..g).map(|_| (0..m).map(|_| rng.random_bool(density)).collect()).collect();
    let names = |p: &str, n: usize| (0..n).map(|i| format!("{p}{i}")).collect();
    FormalContext::from_matrix(names("g", g), names("m", m), &rows).unwrap()
}

fn as_set(cs: &[FormalConcept]) -> BTreeSet<(u64, u64)> {
    cs.iter().map(|c| (c.extent, c.intent)).collect()
}

fn crit_fca_oracle() -> Outcome {
    let t = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for k in 0..FCA_CONTEXTS {
        let (g, m) = (rng.random_range(1..=5), rng.random_range(1..=5));
        let density = rng.random_range(0.1..0.9);
        let ctx = random_context(&mut rng, g, m, density);
        let got = enumerate_concepts(&ctx);
        check(got.len() == as_set(&got).len(), format!("context {k}: duplicate concepts"))?;
        check(as_set(&got) == brute_concepts(&ctx), format!("context {k}: concept set differs from exhaustive search"))?;
    }
    for (g, m) in [(1, 1), (3, 4), (5, 5)] {
        let names = |p: &str, n: usize| (0..n).map(|i| format!("{p}{i}")).collect::<Vec<_>>();
        let full = FormalContext::from_matrix(names("g", g), names("m", m), &vec![vec![true; m]; g]).unwrap();
        let empty = FormalContext::from_matrix(names("g", g), names("m", m), &vec![vec![false; m]; g]).unwrap();
        check(enumerate_concepts(&full).len() == 1, format!("full {g}x{m}: expected 1 concept"))?;
        check(enumerate_concepts(&empty).len() == 2, format!("empty {g}x{m}: expected 2 concepts"))?;
    }
    within(t.elapsed(), 10.0)?;
    Ok(format!("{FCA_CONTEXTS} random contexts and degenerate cases match"))
}

/// Nodes and undirected edges read back from exported DOT text.
fn parse_dot(dot: &str) -> Result<(BTreeSet<String>, BTreeSet<(String, String)>), String> {
    let body = dot
        .trim()
        .strip_prefix("digraph")
        .and_then(|s| s.trim_start().split_once('{'))
        .and_then(|(_, rest)| rest.trim_end().strip_suffix('}'))
        .ok_or("not a digraph block")?;
    let (mut nodes, mut edges) = (BTreeSet::new(), BTreeSet::new());
    let mut rest = body;
    while !rest.trim().is_empty() {
        let mut in_quotes = false;
        let mut escaped = false;
        let end = rest
            .char_indices()
            .find(|&(_, ch)| {
                let stop = ch == ';' && !in_quotes;
                if escaped {
                    escaped = false;
                } else if ch == '\\' {
                    escaped = true;
                } else if ch == '"' {
                    in_quotes = !in_quotes;
                }
                stop
            })
            .map(|(i, _)| i)
            .ok_or("statement without terminator")?;
        let stmt = rest[..end].trim();
        rest = &rest[end + 1..];
        if let Some((a, b)) = stmt.split_once("->") {
            edges.insert((a.trim().to_string(), b.trim().to_string()));
        } else if let Some((id, attrs)) = stmt.split_once('[') {
            let id = id.trim();
            if !["node", "edge", "graph"].contains(&id) {
                check(attrs.trim_end().ends_with(']'), format!("unterminated attribute list for {id}"))?;
                nodes.insert(id.to_string());
            }
        } else if !stmt.contains('=') {
            return Err(format!("unexpected statement {stmt:?}"));
        }
    }
    Ok((nodes, edges))
}

fn validate_lattice(l: &ConceptLattice) -> Result<(), String> {
    let ctx = &l.context;
    check(as_set(&l.concepts) == brute_concepts(ctx), "concepts differ from exhaustive search")?;
    let n = l.concepts.len();
    check(l.concepts[l.top].extent == ctx.all_objects(), "top does not hold every object")?;
    check(l.concepts[l.bottom].intent == ctx.all_attributes(), "bottom does not hold every attribute")?;
    let lt = |a: usize, b: usize| a != b && l.concepts[a].le(&l.concepts[b]);
    let mut covers = BTreeSet::new();
    for lo in 0..n {
        for up in 0..n {
            if lt(lo, up) && !(0..n).any(|z| lt(lo, z) && lt(z, up)) {
                covers.insert((up, lo));
            }
        }
    }
    check(l.edges.iter().copied().collect::<BTreeSet<_>>() == covers, "edges are not the covering relation")?;
    let (nodes, edges) = parse_dot(&export_dot(l))?;
    check(nodes.len() == n, format!("DOT has {} nodes, lattice {n}", nodes.len()))?;
    let want: BTreeSet<(String, String)> = covers.iter().map(|(u, d)| (format!("c{u}"), format!("c{d}"))).collect();
    check(edges == want, "DOT edges differ from covering relation")?;
    Ok(())
}

fn crit_fca_fixture() -> Outcome {
    let r = fixture_rrc();
    let mut parts = Vec::new();
    for t in [0.1, 0.2, 0.8, 0.9] {
        let l = concept_lattice(&threshold_context(&r, t).map_err(|e| e.to_string())?).map_err(|e| e.to_string())?;
        validate_lattice(&l).map_err(|e| format!("t={t}: {e}"))?;
        parts.push(format!("t={t}:{}c/{}", l.concepts.len(), if is_total_order(&l) { "chain" } else { "not-chain" }));
    }
    let bands = threshold_bands(&r).map_err(|e| e.to_string())?;
    let mid: Vec<String> = bands
        .iter()
        .filter(|b| b.lo >= 0.2 && b.hi <= 0.8)
        .map(|b| format!("({:.4},{:.4}]:{}", b.lo, b.hi, if b.total_order { "total" } else { "partial" }))
        .collect();
    let mid_lattice = concept_lattice(&threshold_context(&r, 0.5).unwrap()).unwrap();
    Ok(format!(
        "{}; mid-band t=0.5 is_total_order={} (bands {})",
        parts.join(" "),
        is_total_order(&mid_lattice),
        mid.join(" ")
    ))
}

fn grey(levels: &[usize], bins: usize) -> Tensor {
    let v: Vec<f64> = levels.iter().map(|&k| (k as f64 + 0.5) / bins as f64).collect();
    let p = v.len();
    Tensor::from_fn(&[3, 1, p], |i| v[i % p])
}

fn oracle_nmi(a: &[usize], b: &[usize]) -> f64 {
    let n = a.len() as f64;
    let h = |counts: BTreeMap<_, usize>| -> f64 {
        counts.values().map(|&c| c as f64 / n).map(|p| -p * p.ln()).sum()
    };
    let count = |keys: Vec<(usize, usize)>| {
        let mut m = BTreeMap::new();
        for k in keys {
            *m.entry(k).or_insert(0) += 1;
        }
        m
    };
    let ha = h(count(a.iter().map(|&x| (x, 0)).collect()));
    let hb = h(count(b.iter().map(|&x| (x, 0)).collect()));
    let hab = h(count(a.iter().copied().zip(b.iter().copied()).collect()));
    if ha == 0.0 || hb == 0.0 {
        0.0
    } else {
        (ha + hb - hab) / (ha * hb).sqrt()
    }
}

fn crit_nmi() -> Outcome {
    let t = Instant::now();
    let bins = 64;
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut worst_oracle = 0.0f64;
    for _ in 0..200 {
        let p = rng.random_range(4..200);
        let la: Vec<usize> = (0..p).map(|_| rng.random_range(0..bins)).collect();
        let lb: Vec<usize> = la.iter().map(|&x| if rng.random_bool(0.4) { rng.random_range(0..bins) } else { x }).collect();
        let (a, b) = (grey(&la, bins), grey(&lb, bins));
        let ab = nmi(&a, &b, bins).unwrap();
        let ba = nmi(&b, &a, bins).unwrap();
        check((ab - ba).abs() < NMI_SYM_TOL, format!("asymmetric: {ab} vs {ba}"))?;
        check((0.0..=1.0).contains(&ab), format!("out of range: {ab}"))?;
        worst_oracle = worst_oracle.max((ab - oracle_nmi(&la, &lb)).abs());
        if la.iter().any(|&x| x != la[0]) {
            let s = nmi(&a, &a, bins).unwrap();
            check((s - 1.0).abs() < NMI_SELF_TOL, format!("nmi(x,x) = {s}"))?;
        }
        let perm = {
            let mut p: Vec<usize> = (0..bins).collect();
            for i in (1..bins).rev() {
                p.swap(i, rng.random_range(0..=i));
            }
            p
        };
        let relabeled = grey(&la.iter().map(|&x| perm[x]).collect::<Vec<_>>(), bins);
        let r = nmi(&a, &relabeled, bins).unwrap();
        let want = if la.iter().any(|&x| x != la[0]) { 1.0 } else { 0.0 };
        check((r - want).abs() < NMI_SELF_TOL, format!("bijective relabel gave {r}"))?;
    }
    check(worst_oracle < 1e-9, format!("oracle mismatch {worst_oracle:e}"))?;
    let (rows, cols) = (16usize, 16usize);
    let x: Vec<usize> = (0..rows * cols).map(|i| (i / cols % 2) * 40).collect();
    let y: Vec<usize> = (0..rows * cols).map(|i| (i % cols % 2) * 40 + 3).collect();
    let ind = nmi(&grey(&x, bins), &grey(&y, bins), bins).unwrap();
    check(ind.abs() < 1e-12, format!("independent binary patterns gave {ind}"))?;
    within(t.elapsed(), 5.0)?;
    Ok(format!("symmetry, self, range, independence, relabel; oracle diff {worst_oracle:.1e}"))
}

fn mini_specs() -> (ArchitectureSpec, ArchitectureSpec) {
    let ae = ArchitectureSpec {
        name: "mini-ae".into(),
        family: Family::AeSegnet,
        input_shape: [2, 4, 4],
        class_count: 0,
        stage_widths: vec![3, 4],
        pool_stages: 2,
        batch_norm: true,
        dense_width: 8,
    };
    let cls = ArchitectureSpec {
        name: "mini-cls".into(),
        family: Family::Residual,
        input_shape: [2, 4, 4],
        class_count: 3,
        stage_widths: vec![3, 4],
        pool_stages: 1,
        batch_norm: true,
        dense_width: 8,
    };
    (ae, cls)
}

fn pool_oracle(x: &Tensor, k: usize) -> (Vec<f64>, Vec<usize>) {
    let (n, c, h, w) = x.dims4().unwrap();
    let (mut vals, mut idx) = (Vec::new(), Vec::new());
    for plane in 0..n * c {
        let d = &x.data()[plane * h * w..(plane + 1) * h * w];
        for pr in 0..h / k {
            for pc in 0..w / k {
                let mut best = (f64::NEG_INFINITY, 0);
                for r in pr * k..pr * k + k {
                    for col in pc * k..pc * k + k {
                        if d[r * w + col] > best.0 {
                            best = (d[r * w + col], r * w + col);
                        }
                    }
                }
                vals.push(best.0);
                idx.push(best.1);
            }
        }
    }
    (vals, idx)
}

fn param_of<'a>(ae: &'a mut AutoencoderModel, part: &str, name: &str) -> &'a mut Tensor {
    let store = if part == "encoder" { &mut ae.encoder } else { &mut ae.decoder };
    store.param_mut(name).unwrap()
}

fn crit_gradients() -> Outcome {
    let t = Instant::now();
    let (ae_spec, cls_spec) = mini_specs();
    let mut cls = build_classifier(&cls_spec, 4).unwrap();
    cls.freeze();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let x = Tensor::from_fn(&[3, 2, 4, 4], |_| rng.random_range(0.1..0.9));
    let labels = [0, 2, 1];
    let mut ae = build_autoencoder(&ae_spec, 6).unwrap();
    // zero biases put unpooled positions exactly on the relu kink
    for store in [&mut ae.encoder, &mut ae.decoder] {
        let names: Vec<String> = store.param_names().filter(|n| n.ends_with("bias") || n.ends_with("beta")).map(String::from).collect();
        for n in names {
            for v in store.param_mut(&n).unwrap().data_mut() {
                *v += rng.random_range(-0.2..0.2);
            }
        }
    }
    let cm = CoupledModel::attach(ae, &cls).unwrap();
    let g = cm.loss_and_grads(&x, &labels, UpdateTarget::Both).unwrap();
    let base = cm.into_autoencoder();
    let loss_of = |ae: AutoencoderModel| CoupledModel::attach(ae, &cls).unwrap().loss_and_grads(&x, &labels, UpdateTarget::Both).unwrap().loss;
    let mut worst = 0.0f64;
    let mut checked = 0;
    for (part, grads) in [("encoder", &g.encoder), ("decoder", &g.decoder)] {
        for (name, analytic) in grads {
            let mut numeric = vec![0.0; analytic.len()];
            for (i, slot) in numeric.iter_mut().enumerate() {
                let mut plus = base.clone();
                let mut minus = base.clone();
                param_of(&mut plus, part, name).data_mut()[i] += FD_EPS;
                param_of(&mut minus, part, name).data_mut()[i] -= FD_EPS;
                *slot = (loss_of(plus) - loss_of(minus)) / (2.0 * FD_EPS);
            }
            let diff: f64 = analytic.data().iter().zip(&numeric).map(|(a, n)| (a - n).powi(2)).sum::<f64>().sqrt();
            let scale = analytic.data().iter().map(|a| a * a).sum::<f64>().sqrt().max(numeric.iter().map(|n| n * n).sum::<f64>().sqrt());
            let rel = if scale < 1e-10 { diff } else { diff / scale };
            check(rel < FD_REL_TOL, format!("{part}.{name}: relative error {rel:.2e}"))?;
            worst = worst.max(rel);
            checked += 1;
        }
    }
    check(checked > 0, "no gradients produced")?;

    for seed in 0..50 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = Tensor::from_fn(&[2, 3, 8, 8], |_| (rng.random_range(0..6) + seed % 2) as f64 / 6.0);
        let (p, rec) = pool_with_indices(&x, 2).unwrap();
        let (vals, idx) = pool_oracle(&x, 2);
        check(p.data() == vals.as_slice(), "pooled values differ from oracle")?;
        check(rec.indices.iter().map(|&i| i as usize).eq(idx.iter().copied()), "indices differ from first-max oracle")?;
        let u = unpool_with_indices(&p, &rec).unwrap();
        for (cell, &v) in p.data().iter().enumerate() {
            let plane = cell / 16;
            check(u.data()[plane * 64 + idx[cell]] == v, "unpool misplaced a value")?;
        }
        let nonzero_elsewhere = u.data().iter().enumerate().any(|(i, &v)| {
            let (plane, off) = (i / 64, i % 64);
            v != 0.0 && !(plane * 16..plane * 16 + 16).any(|cell| idx[cell] == off)
        });
        check(!nonzero_elsewhere, "unpool wrote outside recorded positions")?;
        let (p2, rec2) = pool_with_indices(&u, 2).unwrap();
        let positive = x.data().iter().all(|&v| v > 0.0);
        if positive {
            check(p2 == p && rec2 == rec, "pool(unpool(pool(x))) != pool(x)")?;
        }
        check(p2 == p, "pool round trip changed values")?;
    }
    within(t.elapsed(), 30.0)?;
    Ok(format!("{checked} parameter tensors, worst relative error {worst:.2e}; pool/unpool exact"))
}

fn workspace_root() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..")
}

fn crit_frozen() -> Outcome {
    let t = Instant::now();
    let m = load_manifest(&workspace_root().join("manifests/smoke.toml")).map_err(|e| e.to_string())?;
    let zoo = m.zoo().map_err(|e| e.to_string())?;
    let id = &m.models.classifiers[0];
    let mut cls = build_classifier(&zoo[id], 7).unwrap();
    cls.freeze();
    let ae = build_autoencoder(&zoo[&m.models.autoencoder], 8).unwrap();
    let data: Dataset = m.load_split(m.finetune_split()).map_err(|e| e.to_string())?;
    let cfg = FinetuneConfig {
        update_target: UpdateTarget::Decoder,
        epochs: usize::MAX / 2,
        max_steps: Some(FINETUNE_STEPS),
        ..m.finetune_config(id)
    };
    let (cls_before, enc_before, dec_before) = (cls.checksum(), ae.encoder_checksum(), ae.decoder_checksum());
    let (tuned, log) = finetune(CoupledModel::attach(ae, &cls).unwrap(), &data, &cfg).map_err(|e| e.to_string())?;
    check(log.steps == FINETUNE_STEPS, format!("ran {} steps", log.steps))?;
    check(cls.checksum() == cls_before, "classifier checksum changed")?;
    check(tuned.encoder_checksum() == enc_before, "encoder checksum changed")?;
    check(tuned.decoder_checksum() != dec_before, "decoder never moved")?;
    within(t.elapsed(), 300.0)?;
    Ok(format!("{} steps on {id}; classifier and encoder bytes unchanged", log.steps))
}

struct Reference {
    top1: AccuracyMatrix,
    noise: NoiseSweep,
    nmi: Vec<NmiReport>,
    classifiers: Vec<String>,
}

fn reference_run() -> Result<Reference, String> {
    let m = load_manifest(&workspace_root().join("manifests/reference.toml")).map_err(|e| e.to_string())?;
    let classifiers = m.models.classifiers.clone();
    let out = Path::new(env!("CARGO_TARGET_TMPDIR")).join("acceptance");
    let digest = m.digest().map_err(|e| e.to_string())?;
    run_pipeline(m, &out, true).map_err(|e| e.to_string())?;
    let dir = sigprobe::orchestrator::pipeline::run_dir_for(&out, &digest);
    let open = |p: &str| std::fs::File::open(dir.join(p)).map_err(|e| format!("{p}: {e}"));
    Ok(Reference {
        top1: AccuracyMatrix::read_csv(open("tables/accuracy_top1.csv")?).map_err(|e| e.to_string())?,
        noise: NoiseSweep::read_csv(open("tables/noise_sweep_mean.csv")?).map_err(|e| e.to_string())?,
        nmi: serde_json::from_reader(open("tables/nmi.json")?).map_err(|e| e.to_string())?,
        classifiers,
    })
}

fn crit_finetune_direction(r: &Reference) -> Outcome {
    let mut parts = Vec::new();
    let mut bad = Vec::new();
    for c in &r.classifiers {
        let tuned = r.top1.get(&format!("A_{c}"), c).ok_or(format!("missing A_{c}"))?;
        let base = r.top1.get("A_S", c).ok_or("missing A_S")?;
        parts.push(format!("{c}:{:+.4}", tuned - base));
        if tuned < base {
            bad.push(c.clone());
        }
    }
    check(bad.is_empty(), format!("A_i->i below A_S->i for {bad:?} ({})", parts.join(" ")))?;
    Ok(format!("A_i->i - A_S->i: {}", parts.join(" ")))
}

fn crit_noise_direction(r: &Reference) -> Outcome {
    let mut parts = Vec::new();
    for s in NOISE_LEVELS {
        let mut wins = 0;
        for c in &r.classifiers {
            let tuned = r.noise.at(&format!("A_{c}"), c, s).ok_or(format!("missing A_{c} at s={s}"))?;
            let raw = r.noise.at("identity", c, s).ok_or(format!("missing identity at s={s}"))?;
            wins += usize::from(tuned >= raw);
            parts.push(format!("s={s} {c}:{:+.4}", tuned - raw));
        }
        check(wins >= 3, format!("s={s}: only {wins}/{} classifiers ({})", r.classifiers.len(), parts.join(" ")))?;
    }
    Ok(parts.join(" "))
}

fn crit_nmi_direction(r: &Reference) -> Outcome {
    let intra: BTreeMap<&str, f64> =
        r.nmi.iter().filter(|n| n.mode == NmiMode::Intra).map(|n| (n.autoencoder.as_str(), n.mean)).collect();
    let base = *intra.get("A_S").ok_or("missing A_S")?;
    let mut tuned: Vec<(&str, f64)> = intra.iter().filter(|(k, _)| **k != "A_S").map(|(k, v)| (*k, *v)).collect();
    tuned.sort_by(|a, b| b.1.total_cmp(&a.1));
    let order = tuned.iter().map(|(k, v)| format!("{k}={v:.4}")).collect::<Vec<_>>().join(" > ");
    let above: Vec<&str> = tuned.iter().filter(|(_, v)| *v > base).map(|(k, _)| *k).collect();
    check(above.is_empty(), format!("A_S={base:.4} below {above:?}; order {order}"))?;
    Ok(format!("A_S={base:.4}; fine-tuned order {order}"))
}

fn crit_plateau() -> Outcome {
    let t = Instant::now();
    let (decay, patience) = (0.2, 2);
    let mut lr = 0.01;
    let losses = [1.0, 0.9, 0.95, 0.92, 0.8, 0.85, 0.85, 0.85, 0.85, 0.7, 0.71];
    let mut pattern = Vec::new();
    for k in 1..=losses.len() {
        let next = plateau_schedule(&losses[..k], lr, decay, patience).map_err(|e| e.to_string())?;
        pattern.push(next < lr);
        lr = next;
    }
    let want = [false, false, false, true, false, false, true, false, true, false, false];
    check(pattern == want, format!("decays at {pattern:?}"))?;
    check((lr - 0.01 * 0.2f64.powi(3)).abs() < 1e-18, format!("final lr {lr}"))?;
    let flat = [0.5; 7];
    let decays = (1..=flat.len()).filter(|&k| plateau_schedule(&flat[..k], 1.0, decay, patience).unwrap() < 1.0).count();
    check(decays == 3, format!("flat sequence decayed {decays} times"))?;
    within(t.elapsed(), 1.0)?;
    Ok("decay after every second consecutive non-improving check".into())
}

fn main() {
    let mut failed = 0;
    let mut report = |n: usize, name: &str, outcome: Outcome| match outcome {
        Ok(detail) => println!("criterion {n:>2} PASS {name}: {detail}"),
        Err(why) => {
            failed += 1;
            println!("criterion {n:>2} FAIL {name}: {why}");
        }
    };
    report(1, "rrc fixture", crit_rrc_fixture());
    report(2, "fca oracle", crit_fca_oracle());
    report(3, "fca on fixture", crit_fca_fixture());
    report(4, "nmi properties", crit_nmi());
    report(5, "gradient and pooling checks", crit_gradients());
    report(6, "frozen parameters", crit_frozen());
    match reference_run() {
        Ok(r) => {
            report(7, "fine-tuned vs base accuracy", crit_finetune_direction(&r));
            report(8, "noise robustness direction", crit_noise_direction(&r));
            report(9, "nmi preservation direction", crit_nmi_direction(&r));
        }
        Err(e) => {
            for (n, name) in [(7, "fine-tuned vs base accuracy"), (8, "noise robustness direction"), (9, "nmi preservation direction")] {
                report(n, name, Err(format!("reference run failed: {e}")));
            }
        }
    }
    report(10, "plateau schedule", crit_plateau());
    if failed > 0 {
        println!("{failed} criteria failed");
        std::process::exit(1);
    }
}
