//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any fails. Runs without a test harness so the lines always
//! show up in `cargo test` output.

use std::collections::BTreeSet;
use std::path::Path;
use std::process::ExitCode;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use titok::alignment::{
    align_record, align_spans, propagate_mask, AlignDatasetOptions, AlignOptions, Normalizer,
    Tokenizer, VocabTokenizer,
};
use titok::datamodel::{
    read_jsonl, read_masked_dataset, DatasetMeta, ExcessReport, MaskedDataset, MaskedRecord,
    PipelineConfig, RougeSetting, ScoredTrace, TokenMask, TokenRecord,
};
use titok::excess::excess_scores;
use titok::filtering::{filter_samples, select_top_k, select_tokens, RankPolicy};
use titok::pipeline::{
    export_masked_dataset, run_pipeline, RunOptions, StageStatus, DATASET_FILE, MANIFEST_FILE,
    TARGET_MODEL_FILE, TRACES_FILE,
};
use titok::synthgen::{admit_query, lcs_len, rouge_l, rouge_l_words, AdmissionGate};
use titok::toylab::{
    mean_nll, mean_planted_rank, random_control, train_masked_target, ToyLM, ToyWorld,
};

struct Verdict {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: impl Into<String>) -> Verdict {
    Verdict {
        pass,
        detail: detail.into(),
    }
}

fn within(elapsed: Duration, limit_s: u64) -> bool {
    elapsed < Duration::from_secs(limit_s)
}

// ---------------------------------------------------------------- excess

fn random_trace(rng: &mut ChaCha8Rng, id: usize) -> ScoredTrace {
    let len = rng.gen_range(1..=64);
    let tokens = (0..len)
        .map(|i| TokenRecord {
            logp_amateur: -rng.gen_range(0.0..25.0),
            logp_expert: -rng.gen_range(0.0..25.0),
            token_id: i as u32,
            token_text: "x".into(),
        })
        .collect();
    ScoredTrace {
        query_text: String::new(),
        response_text: "x".repeat(len),
        sample_id: format!("t{id}"),
        tokens,
    }
}

fn excess_correctness() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut exact = 0;
    let mut worst_shift = 0.0f64;
    let mut bit_shift_ok = true;
    let traces: Vec<ScoredTrace> = (0..1000).map(|i| random_trace(&mut rng, i)).collect();
    for t in &traces {
        let r = excess_scores(t).expect("valid trace");
        let oracle: Vec<f64> = t.tokens.iter().map(|x| x.logp_expert - x.logp_amateur).collect();
        if r.scores.len() == oracle.len()
            && r.scores.iter().zip(&oracle).all(|(a, b)| a.to_bits() == b.to_bits())
        {
            exact += 1;
        }
    }
    let constants: Vec<f64> = (0..100).map(|_| -rng.gen_range(0.0..50.0)).collect();
    for (n, &c) in constants.iter().enumerate() {
        let t = &traces[n * 10];
        let base = excess_scores(t).unwrap();
        let mut shifted = t.clone();
        for x in &mut shifted.tokens {
            x.logp_amateur += c;
            x.logp_expert += c;
        }
        let s = excess_scores(&shifted).unwrap();
        for (a, b) in base.scores.iter().zip(&s.scores) {
            worst_shift = worst_shift.max((a - b).abs());
        }
        // A zero shift performs identical float ops and must be bit-exact.
        let mut zero = t.clone();
        for x in &mut zero.tokens {
            x.logp_amateur += 0.0;
            x.logp_expert += 0.0;
        }
        let z = excess_scores(&zero).unwrap();
        bit_shift_ok &= z
            .scores
            .iter()
            .zip(&base.scores)
            .all(|(a, b)| a.to_bits() == b.to_bits());
    }
    verdict(
        exact == 1000 && worst_shift <= 1e-12 && bit_shift_ok,
        format!("{exact}/1000 exact, max shift deviation {worst_shift:.1e} over 100 constants"),
    )
}

// ------------------------------------------------------------ filtering

fn oracle_order(values: &[f64]) -> Vec<usize> {
    // Full stable sort: larger first, earlier index on numeric ties.
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| {
        values[b]
            .partial_cmp(&values[a])
            .unwrap()
            .then(a.cmp(&b))
    });
    idx
}

fn tie_values(rng: &mut ChaCha8Rng, n: usize, style: usize) -> Vec<f64> {
    (0..n)
        .map(|_| match style {
            0 => 0.5,
            1 => [-1.0, 1.0][rng.gen_range(0..2)],
            2 => [-2.0, -0.5, 0.0, 0.25, 3.0][rng.gen_range(0..5)],
            3 => [0.0, -0.0][rng.gen_range(0..2)],
            4 => rng.gen_range(-5.0..5.0),
            _ => (rng.gen_range(-3i32..3) as f64) * 0.125,
        })
        .collect()
}

fn filtering_oracle() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(22);
    let mut mismatches = 0;
    let mut monotone_fail = 0;
    for inst in 0..500 {
        let style = inst % 6;
        // sample filtering
        let pool = rng.gen_range(1..=256);
        let means = tie_values(&mut rng, pool, style);
        let reports: Vec<ExcessReport> = means
            .iter()
            .enumerate()
            .map(|(i, &m)| ExcessReport {
                mean_score: m,
                sample_id: format!("s{i}"),
                scores: vec![m],
            })
            .collect();
        let m = rng.gen_range(1..=pool);
        let got = filter_samples(&reports, m).unwrap();
        let want: Vec<String> = oracle_order(&means)[..m]
            .iter()
            .map(|&i| format!("s{i}"))
            .collect();
        if got != want {
            mismatches += 1;
        }
        let mut prev: BTreeSet<String> = BTreeSet::new();
        for mm in (1..=pool).step_by((pool / 8).max(1)) {
            let cur: BTreeSet<String> = filter_samples(&reports, mm).unwrap().into_iter().collect();
            if !prev.is_subset(&cur) {
                monotone_fail += 1;
            }
            prev = cur;
        }

        // token selection
        let len = rng.gen_range(1..=64);
        let scores = tie_values(&mut rng, len, style);
        let rep = ExcessReport {
            mean_score: 0.0,
            sample_id: "r".into(),
            scores: scores.clone(),
        };
        let order = oracle_order(&scores);
        let mut prev_kept: Vec<bool> = vec![false; len];
        for k in 1..=100usize {
            let mask = select_tokens(&rep, k as f64).unwrap();
            let n = ((k * len) / 100).max(1);
            let mut want = vec![false; len];
            for &i in &order[..n] {
                want[i] = true;
            }
            let got: Vec<bool> = (0..len).map(|i| mask.is_kept(i)).collect();
            if got != want {
                mismatches += 1;
            }
            if prev_kept.iter().zip(&got).any(|(p, g)| *p && !*g) {
                monotone_fail += 1;
            }
            prev_kept = got;
        }
    }
    verdict(
        mismatches == 0 && monotone_fail == 0,
        format!("500 instances, {mismatches} oracle mismatches, {monotone_fail} monotonicity violations"),
    )
}

// ------------------------------------------------------------ alignment

const FRAGMENTS: [&str; 16] = [
    "the", "ing", "and", " ", "er", "qu", "jaz", "zq", "on", "th", "e", "a", "s", "in", "  ", "x",
];

fn random_text(rng: &mut ChaCha8Rng) -> String {
    let mut s = String::new();
    let target = rng.gen_range(1..=40);
    while s.chars().count() < target {
        if rng.gen_bool(0.7) {
            s.push_str(FRAGMENTS[rng.gen_range(0..FRAGMENTS.len())]);
        } else {
            let c = b"abcdefghijklmnopqrstuvwxyz "[rng.gen_range(0..27)] as char;
            s.push(c);
        }
    }
    s
}

fn decode(tok: &dyn Tokenizer, ids: &[u32]) -> String {
    ids.iter().map(|&i| tok.piece_text(i).unwrap()).collect()
}

fn alignment_fuzz() -> Verdict {
    let ch = VocabTokenizer::toy_char();
    let mg = VocabTokenizer::toy_merge();
    let norm = Normalizer::default();
    let mut rng = ChaCha8Rng::seed_from_u64(33);
    let mut partition_bad = 0;
    let mut text_bad = 0;
    let mut worst_mean = 0.0f64;
    let mut identity_bad = 0;
    let mut merged = 0;
    for n in 0..1000 {
        let text = random_text(&mut rng);
        let s = ch.tokenize(&text).unwrap();
        let t = mg.tokenize(&text).unwrap();
        if t.len() < s.len() {
            merged += 1;
        }
        let al = align_spans(&s, &t, &ch, &mg, &norm, AlignOptions::default()).unwrap();
        // partition oracle, written out independently
        let (mut si, mut ti) = (0, 0);
        let mut ok = true;
        for p in &al.pairs {
            ok &= p.source.start == si && p.target.start == ti;
            ok &= p.source.end > p.source.start && p.target.end > p.target.start;
            si = p.source.end;
            ti = p.target.end;
            if norm.normalize(&decode(&ch, &s[p.source.range()]))
                != norm.normalize(&decode(&mg, &t[p.target.range()]))
            {
                text_bad += 1;
            }
        }
        ok &= si == s.len() && ti == t.len();
        if !ok {
            partition_bad += 1;
        }

        let keep: Vec<f64> = (0..s.len())
            .map(|_| if rng.gen_bool(0.5) { 1.0 } else { 0.0 })
            .collect();
        let src_mask = TokenMask::from_scores(format!("a{n}"), keep).unwrap();
        let frac = propagate_mask(&al, &src_mask).unwrap();
        for p in &al.pairs {
            let sm: f64 = p.source.range().map(|i| src_mask.keep[i]).sum::<f64>() / p.source.len() as f64;
            let tm: f64 = p.target.range().map(|i| frac.keep[i]).sum::<f64>() / p.target.len() as f64;
            worst_mean = worst_mean.max((sm - tm).abs());
        }

        // identity path: same tokenizer on both sides returns the mask as is
        let scores: Vec<f64> = (0..s.len()).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let mask = select_top_k(&format!("a{n}"), &scores, 70.0, RankPolicy::default()).unwrap();
        let rec = MaskedRecord {
            mask: mask.clone(),
            query_text: String::new(),
            response_text: text.clone(),
            sample_id: format!("a{n}"),
            token_ids: s.clone(),
        };
        let back = align_record(&rec, &ch, &ch, 70.0, &AlignDatasetOptions::default()).unwrap();
        if back.mask != mask || back.token_ids != s {
            identity_bad += 1;
        }
    }
    verdict(
        partition_bad == 0 && text_bad == 0 && worst_mean <= 1e-12 && identity_bad == 0,
        format!(
            "1000 strings ({merged} with merges): {partition_bad} partition / {text_bad} text violations, \
             max span-mean drift {worst_mean:.1e}, {identity_bad} identity mismatches"
        ),
    )
}

// ---------------------------------------------------------------- rouge

fn lcs_table(a: &[String], b: &[String]) -> usize {
    let mut t = vec![vec![0usize; b.len() + 1]; a.len() + 1];
    for i in 1..=a.len() {
        for j in 1..=b.len() {
            t[i][j] = if a[i - 1] == b[j - 1] {
                t[i - 1][j - 1] + 1
            } else {
                t[i - 1][j].max(t[i][j - 1])
            };
        }
    }
    t[a.len()][b.len()]
}

fn rouge_oracle() -> Verdict {
    let words = ["a", "b", "c", "d", "e", "f", "g", "h"];
    let mut rng = ChaCha8Rng::seed_from_u64(44);
    let mut bad = 0;
    for _ in 0..2000 {
        let seq = |rng: &mut ChaCha8Rng| -> Vec<String> {
            let n = rng.gen_range(0..=30);
            let vocab = rng.gen_range(1..=words.len());
            (0..n).map(|_| words[rng.gen_range(0..vocab)].to_string()).collect()
        };
        let a = seq(&mut rng);
        let b = seq(&mut rng);
        let lcs = lcs_table(&a, &b);
        let want = if a.is_empty() || b.is_empty() {
            0.0
        } else {
            let p = lcs as f64 / a.len() as f64;
            let r = lcs as f64 / b.len() as f64;
            if p + r == 0.0 {
                0.0
            } else {
                2.0 * p * r / (p + r)
            }
        };
        let got = rouge_l_words(&a, &b);
        if lcs_len(&a, &b) != lcs || (got - want).abs() > 4.0 * f64::EPSILON {
            bad += 1;
        }
    }
    // Boundary: exact 0.7 passes under the strict rule, above it is rejected.
    let reference = "w1 w2 w3 w4 w5 w6 w7 a b c".to_string();
    let at = "w1 w2 w3 w4 w5 w6 w7 x y z";
    let uneven = "w1 w2 w3 w4 w5 w6 w7 q"; // 2*7/(8+10) = 0.777.. > 0.7
    let above = "w1 w2 w3 w4 w5 w6 w7 w8 b c";
    let t = RougeSetting::Threshold(0.7);
    let refs = std::slice::from_ref(&reference);
    let inclusive = {
        let mut g = AdmissionGate::new(t, true).reject_at_threshold(true);
        g.commit(&reference);
        g
    };
    let boundary_ok = rouge_l(at, &reference) == 0.7
        && admit_query(at, refs, t, true).is_accept()
        && !inclusive.check(at).is_accept()
        && !admit_query(uneven, refs, t, true).is_accept()
        && !admit_query(above, refs, t, true).is_accept();
    verdict(
        bad == 0 && boundary_ok,
        format!("2000 pairs, {bad} mismatches; boundary at 0.7 strict: {boundary_ok}"),
    )
}

// ------------------------------------------------------------ end to end

fn toy_config(dir: &Path, seed: u64, target_tok: &str) -> PipelineConfig {
    PipelineConfig {
        pool_size: 80,
        keep_m: 40,
        k_percent: 70.0,
        seed,
        tokenizer_target: target_tok.into(),
        out_dir: dir.to_path_buf(),
        ..Default::default()
    }
}

fn stage_files_identical(a: &Path, b: &Path) -> (bool, usize) {
    let mut n = 0;
    let mut same = true;
    let mut names: Vec<_> = std::fs::read_dir(a)
        .unwrap()
        .map(|e| e.unwrap().file_name())
        .filter(|f| f != MANIFEST_FILE)
        .collect();
    names.sort();
    for f in names {
        n += 1;
        same &= std::fs::read(a.join(&f)).ok() == std::fs::read(b.join(&f)).ok();
    }
    (same, n)
}

fn control_dataset(traces: &[ScoredTrace], idx: &[usize]) -> MaskedDataset {
    let records: Vec<MaskedRecord> = idx
        .iter()
        .map(|&i| {
            let t = &traces[i];
            MaskedRecord {
                mask: TokenMask::from_bools(&t.sample_id, &vec![true; t.tokens.len()]),
                query_text: t.query_text.clone(),
                response_text: t.response_text.clone(),
                sample_id: t.sample_id.clone(),
                token_ids: t.tokens.iter().map(|x| x.token_id).collect(),
            }
        })
        .collect();
    MaskedDataset {
        meta: DatasetMeta {
            k_percent: 100.0,
            m_kept: records.len(),
            source_model_tag: "toy-expert".into(),
            target_tokenizer_tag: "toy-char".into(),
        },
        records,
    }
}

fn end_to_end_transfer() -> Verdict {
    let started = Instant::now();
    let world = ToyWorld::standard("toy-char", 0.1).unwrap();
    let tmp = tempfile::tempdir().unwrap();

    // (a) rerun reproducibility
    let a = tmp.path().join("a");
    let b = tmp.path().join("b");
    run_pipeline(&toy_config(&a, 0, "toy-char"), RunOptions::default()).unwrap();
    run_pipeline(&toy_config(&b, 0, "toy-char"), RunOptions::default()).unwrap();
    let (identical, files) = stage_files_identical(&a, &b);

    // (b) planted positions rank near the top
    let traces: Vec<ScoredTrace> = read_jsonl(a.join(TRACES_FILE)).unwrap();
    let rank = mean_planted_rank(&world.adapter, &traces).unwrap().unwrap_or(1.0);

    // (c) filtered vs random-sample control, five seeds
    let mut margins = Vec::new();
    for seed in 0..5u64 {
        let dir = tmp.path().join(format!("seed{seed}"));
        run_pipeline(&toy_config(&dir, seed, "toy-char"), RunOptions::default()).unwrap();
        let target = ToyLM::load(dir.join(TARGET_MODEL_FILE)).unwrap();
        let traces: Vec<ScoredTrace> = read_jsonl(dir.join(TRACES_FILE)).unwrap();
        let idx = random_control(traces.len(), 40, seed ^ 0x5eed).unwrap();
        let control = train_masked_target(&control_dataset(&traces, &idx), 0.1).unwrap();
        let tok = world.tokenizer.as_ref();
        let nll_t = mean_nll(&target, tok, &world.heldout_task).unwrap();
        let nll_c = mean_nll(&control, tok, &world.heldout_task).unwrap();
        margins.push(nll_c - nll_t);
    }
    let elapsed = started.elapsed();
    let margin_text: Vec<String> = margins.iter().map(|m| format!("{m:+.4}")).collect();
    verdict(
        identical && rank < 0.25 && margins.iter().all(|&m| m > 0.0) && within(elapsed, 60),
        format!(
            "(a) {files} stage files identical: {identical}; (b) planted mean rank {rank:.3}; \
             (c) NLL margins per seed [{}] nats; {:.2}s",
            margin_text.join(", "),
            elapsed.as_secs_f64()
        ),
    )
}

fn cross_tokenizer() -> Verdict {
    let started = Instant::now();
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path().join("x");
    let m = run_pipeline(&toy_config(&dir, 0, "toy-merge"), RunOptions::default()).unwrap();
    let aligned = m.stage("align").map(|s| s.status) == Some(StageStatus::Done);
    let ds = export_masked_dataset(&dir).unwrap();
    let reread = read_masked_dataset(dir.join(DATASET_FILE)).unwrap();
    let valid = reread.check().is_ok() && reread == ds;
    let merge = VocabTokenizer::toy_merge();
    let mut expected = 0;
    let mut in_merge_space = ds.meta.target_tokenizer_tag == "toy-merge";
    for r in &ds.records {
        let l = merge.tokenize(&r.response_text).unwrap();
        in_merge_space &= l == r.token_ids;
        expected += ((70 * l.len()) / 100).max(1);
    }
    let kept = ds.tokens_kept();
    let elapsed = started.elapsed();
    verdict(
        aligned && valid && in_merge_space && kept == expected && within(elapsed, 60),
        format!(
            "align ran: {aligned}; export valid: {valid}; {} records, kept {kept} vs expected {expected}; {:.2}s",
            ds.records.len(),
            elapsed.as_secs_f64()
        ),
    )
}

fn main() -> ExitCode {
    let criteria: [(&str, u64, fn() -> Verdict); 6] = [
        ("excess-score correctness", 5, excess_correctness),
        ("sample/token filtering oracle", 10, filtering_oracle),
        ("alignment fuzz", 30, alignment_fuzz),
        ("rouge-l oracle", 60, rouge_oracle),
        ("end-to-end toy transfer", 60, end_to_end_transfer),
        ("cross-tokenizer end-to-end", 60, cross_tokenizer),
    ];
    let mut failed = 0;
    for (name, limit, f) in criteria {
        let t = Instant::now();
        let v = f();
        let elapsed = t.elapsed();
        let pass = v.pass && within(elapsed, limit);
        if !pass {
            failed += 1;
        }
        println!(
            "[{}] {name}: {} ({:.2}s, limit {limit}s)",
            if pass { "PASS" } else { "FAIL" },
            v.detail,
            elapsed.as_secs_f64()
        );
    }
    println!("acceptance: {} of 6 criteria passed", 6 - failed);
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
