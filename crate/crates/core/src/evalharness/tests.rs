use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::corpus::synth::{self, SynthShape};
use crate::pipeline::{fit_tokenizer, synthetic_builder_config};
use crate::tokenspace::WordTokenizer;
use crate::trainer::{init_model, TrainConfig};

/// Independent oracle: dense confusion matrix, F1 = 2TP / (2TP + FP + FN).
fn brute_macro_f1(gold: &[usize], pred: &[usize], k: usize) -> f64 {
    let mut m = vec![vec![0usize; k]; k];
    for (g, p) in gold.iter().zip(pred) {
        m[*g][*p] += 1;
    }
    let mut f1s = Vec::new();
    for c in 0..k {
        let tp = m[c][c];
        let fp: usize = (0..k).filter(|&r| r != c).map(|r| m[r][c]).sum();
        let fn_: usize = (0..k).filter(|&p| p != c).map(|p| m[c][p]).sum();
        if tp + fp + fn_ == 0 {
            continue;
        }
        f1s.push(2.0 * tp as f64 / (2 * tp + fp + fn_) as f64);
    }
    f1s.iter().sum::<f64>() / f1s.len() as f64
}

#[test]
fn macro_f1_matches_confusion_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..1000 {
        let k = rng.random_range(1..=5);
        let n = rng.random_range(1..=50);
        let gold: Vec<usize> = (0..n).map(|_| rng.random_range(0..k)).collect();
        let pred: Vec<usize> = (0..n).map(|_| rng.random_range(0..k)).collect();
        let name = |v: usize| format!("c{v}");
        let g: Vec<String> = gold.iter().map(|&v| name(v)).collect();
        let p: Vec<Option<String>> = pred.iter().map(|&v| Some(name(v))).collect();
        let ours = macro_f1(&g, &p);
        let oracle = brute_macro_f1(&gold, &pred, k);
        assert!((ours - oracle).abs() < 1e-12, "{ours} vs {oracle}");
    }
}

#[test]
fn single_candidate_and_ties() {
    assert_eq!(pick_best(&["O"], &[-3.0]), "O");
    assert_eq!(pick_best(&["IS", "IE", "O"], &[-1.0, -1.0, -2.0]), "IE");
    assert_eq!(pick_best(&["IE", "IS"], &[-5.0, -1.0]), "IS");
}

#[test]
fn generation_parser() {
    let c = ["IE", "IS", "O"];
    assert_eq!(
        parse_generated("the answer is IS", &c).as_deref(),
        Some("IS")
    );
    assert_eq!(parse_generated("no label here", &c), None);
    assert_eq!(parse_generated("IE or IS", &c).as_deref(), Some("IE"));
    assert_eq!(
        parse_generated("N-Sw", &["N-Sw", "Sw"]).as_deref(),
        Some("N-Sw")
    );
    assert_eq!(
        parse_generated("Sw", &["N-Sw", "Sw"]).as_deref(),
        Some("Sw")
    );
}

#[test]
fn reference_targets_hold_table_cells() {
    let t = reference_targets(DatasetId::Lrs, 3);
    let olmo = t
        .iter()
        .find(|r| r.backbone == "OLMo-7B" && r.variant == "lift")
        .unwrap();
    assert_eq!(olmo.macro_f1, 0.578);
    assert_eq!(t.len(), 8);
}

fn setup() -> (WordTokenizer, BuilderConfig, Vec<Timeline>) {
    let bcfg = synthetic_builder_config(3, true);
    let tls = synth::history_task(12, 4, 9);
    let tok = fit_tokenizer(&[(2, 1, tls.as_slice())], &bcfg, 300).unwrap();
    (tok, bcfg, tls)
}

fn tiny_model(vocab: usize, conditioning: bool) -> LiftModel {
    let cfg = TrainConfig {
        model_layers: 1,
        model_d: 16,
        model_heads: 2,
        model_ffn: 32,
        conditioning,
        ..TrainConfig::default()
    };
    init_model(&cfg, vocab, 14).unwrap()
}

#[test]
fn prompts_are_deterministic_and_do_not_depend_on_gold() {
    let (tok, bcfg, tls) = setup();
    let (test, train) = tls.split_at(3);
    let opts = EvalOptions {
        shots: 1,
        ..Default::default()
    };
    let (a, dropped) = build_eval_prompts(&tok, &bcfg, test, train, &opts).unwrap();
    let (b, _) = build_eval_prompts(&tok, &bcfg, test, train, &opts).unwrap();
    assert_eq!(dropped, 0);
    assert_eq!(a.len(), 12);
    assert_eq!(prompt_hash(&a), prompt_hash(&b));
    assert!(a
        .iter()
        .all(|p| p.example.k_actual == 1 && !p.zero_shot_fallback));

    let mut flipped = test.to_vec();
    let item = &mut flipped[0].items[3];
    item.local_label = if item.local_label == "Sw" {
        "N-Sw".into()
    } else {
        "Sw".into()
    };
    let (c, _) = build_eval_prompts(&tok, &bcfg, &flipped, train, &opts).unwrap();
    assert_eq!(a[3].example.prompt, c[3].example.prompt);
    assert_ne!(a[3].gold, c[3].gold);

    let (z, _) = build_eval_prompts(&tok, &bcfg, test, &[], &opts).unwrap();
    assert!(z
        .iter()
        .all(|p| p.zero_shot_fallback && p.example.k_actual == 0));
}

#[test]
fn evaluate_is_deterministic_and_prompts_match_across_models() {
    let (tok, bcfg, tls) = setup();
    let (test, train) = tls.split_at(2);
    let opts = EvalOptions {
        shots: 1,
        ..Default::default()
    };
    let base = tiny_model(tok.vocab_size(), false);
    let lift = tiny_model(tok.vocab_size(), true);
    let r1 = evaluate(&base, &tok, &bcfg, test, train, &opts, "base").unwrap();
    let r2 = evaluate(&base, &tok, &bcfg, test, train, &opts, "base").unwrap();
    let r3 = evaluate(&lift, &tok, &bcfg, test, train, &opts, "lift").unwrap();
    assert_eq!(r1, r2);
    assert_eq!(r1.prompt_hash, r3.prompt_hash);
    assert_eq!(r1.n, 8);
    assert_eq!(r1.invalid, 0);
    assert!(r1.predictions.iter().all(|p| p.scores.len() == 2));
    let g: Vec<String> = r1.predictions.iter().map(|p| p.gold.clone()).collect();
    let p: Vec<Option<String>> = r1.predictions.iter().map(|p| p.pred.clone()).collect();
    assert_eq!(r1.macro_f1, macro_f1(&g, &p));
}

#[test]
fn rank_scores_are_log_probabilities_of_label_tokens() {
    let (tok, bcfg, tls) = setup();
    let model = tiny_model(tok.vocab_size(), false);
    let (prompts, _) =
        build_eval_prompts(&tok, &bcfg, &tls[..1], &[], &EvalOptions::default()).unwrap();
    let ex = &prompts[1].example;
    let s = score_candidate(&model, &tok, ex, "Sw").unwrap();
    // Oracle: log-softmax of the raw logits at the row before each label token.
    let enc = encode_with_spans(&ex.with_response("Sw"), &tok, EncodeOptions::default()).unwrap();
    let logits = to_f64_rows(&model.run(&enc, RunOptions::default()).unwrap().out.logits).unwrap();
    let mut want = 0.0;
    for j in enc.prompt_len..enc.len() - 1 {
        let row = &logits[j - 1];
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + row.iter().map(|x| (x - m).exp()).sum::<f64>().ln();
        want += row[enc.input_ids[j] as usize] - lse;
    }
    assert!(s < 0.0);
    assert!((s - want).abs() < 1e-4, "{s} vs {want}");
}

#[test]
fn generation_mode_reports_invalid_outputs_as_misses() {
    let (tok, bcfg, tls) = setup();
    let model = tiny_model(tok.vocab_size(), false);
    let opts = EvalOptions {
        mode: DecodeMode::Generate,
        max_new_tokens: 3,
        max_examples: Some(3),
        ..Default::default()
    };
    let r = evaluate(&model, &tok, &bcfg, &tls[..2], &[], &opts, "toy").unwrap();
    assert_eq!(r.n, 3);
    assert!(r.predictions.iter().all(|p| p.generated.is_some()));
    let invalid = r.predictions.iter().filter(|p| p.pred.is_none()).count();
    assert_eq!(r.invalid, invalid);
    assert!(r.per_class.iter().all(|c| c.label != INVALID));
}

#[test]
fn empty_shard_is_an_error() {
    let (tok, bcfg, _) = setup();
    let model = tiny_model(tok.vocab_size(), false);
    let err = evaluate(
        &model,
        &tok,
        &bcfg,
        &[],
        &[],
        &EvalOptions::default(),
        "toy",
    )
    .unwrap_err();
    assert!(matches!(err, LiftError::EmptyShard));
}

#[test]
fn report_writes_json_and_csv() {
    let (tok, bcfg, tls) = setup();
    let model = tiny_model(tok.vocab_size(), false);
    let r = evaluate(
        &model,
        &tok,
        &bcfg,
        &tls[..1],
        &[],
        &EvalOptions::default(),
        "toy",
    )
    .unwrap();
    let dir = tempfile::tempdir().unwrap();
    r.write_json(&dir.path().join("r.json")).unwrap();
    r.write_csv(&dir.path().join("r.csv")).unwrap();
    let back: EvalReport = crate::corpus::read_json(&dir.path().join("r.json")).unwrap();
    assert_eq!(back, r);
    let csv = std::fs::read_to_string(dir.path().join("r.csv")).unwrap();
    assert!(csv.lines().last().unwrap().contains("MACRO"));
    assert_eq!(csv.lines().count(), r.per_class.len() + 2);
}

fn cmv() -> Vec<Timeline> {
    synth::generate_timelines(DatasetId::Cmv, SynthShape::desk(DatasetId::Cmv), 4)
}

#[test]
fn conversation_mode_at_thread_start_is_empty() {
    let corpus = cmv();
    for tl in &corpus {
        let pool = context_source_select(&corpus, &tl.items[0], ContextMode::Conversation);
        assert!(pool.is_empty());
    }
}

#[test]
fn context_pools_are_strictly_earlier_and_nested() {
    let corpus = cmv();
    let mut nonempty = 0;
    for tl in &corpus {
        let op = tl.items[0].author.clone();
        for q in &tl.items {
            let conv = context_source_select(&corpus, q, ContextMode::Conversation);
            let all = context_source_select(&corpus, q, ContextMode::AuthorAll);
            let topic = context_source_select(&corpus, q, ContextMode::AuthorTopic);
            for (ti, ii) in conv.iter().chain(&all).chain(&topic) {
                assert!(corpus[*ti].items[*ii].timestamp < q.timestamp);
            }
            for r in &topic {
                assert!(all.contains(r));
                assert_eq!(corpus[r.0].items[0].topic, q.topic);
            }
            if q.author == op {
                for r in &conv {
                    assert!(all.contains(r), "conversation pool escapes author pool");
                }
            }
            nonempty += (!all.is_empty()) as usize;
        }
    }
    assert!(nonempty > 0);
}

#[test]
fn author_topic_keeps_only_matching_topic() {
    use crate::corpus::TimelineItem;
    let mk = |key: &str, ts: i64, author: &str, topic: &str| TimelineItem {
        dataset_id: DatasetId::Cmv,
        sequence_key: key.into(),
        timestamp: ts,
        index_in_timeline: 0,
        text: "x".into(),
        local_label: "1".into(),
        global_label_id: 13,
        speaker_role: None,
        topic: Some(topic.into()),
        author: Some(author.into()),
    };
    let corpus = vec![
        Timeline {
            dataset_id: DatasetId::Cmv,
            sequence_key: "a".into(),
            items: vec![mk("a", 1, "u", "X")],
        },
        Timeline {
            dataset_id: DatasetId::Cmv,
            sequence_key: "b".into(),
            items: vec![mk("b", 2, "u", "Y")],
        },
        Timeline {
            dataset_id: DatasetId::Cmv,
            sequence_key: "c".into(),
            items: vec![mk("c", 3, "v", "X")],
        },
    ];
    let q = mk("d", 10, "u", "X");
    assert_eq!(
        context_source_select(&corpus, &q, ContextMode::AuthorTopic),
        vec![(0, 0)]
    );
    assert_eq!(
        context_source_select(&corpus, &q, ContextMode::AuthorAll),
        vec![(0, 0), (1, 0)]
    );
}
