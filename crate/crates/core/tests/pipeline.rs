use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use signrl::grpo::{rft_train, GrpoConfig, GrpoError, PolicyTriple, RlTask};
use signrl::harness::checkpoint::Checkpoint;
use signrl::harness::config::RunConfig;
use signrl::harness::corpus::{generate, read_corpus, read_split, write_corpus, Corpus, CorpusSpec, RuleKind};
use signrl::harness::pipeline::{
    evaluate, policy_for, prefixes, prepare, reward_config, rft_adapters, run_pretrain, run_sft, score_outputs,
    vocabulary, Meta, TranslationTask,
};
use signrl::nn::{AdapterSpec, Scope};
use signrl::policy::{init_adapters, DecodeConfig, Vocabulary};
use signrl::tensor::{ParamStore, Var};

fn scratch(name: &str) -> std::path::PathBuf {
    let dir = std::env::temp_dir().join(format!("signrl-{name}-{}", std::process::id()));
    std::fs::create_dir_all(&dir).unwrap();
    dir
}

#[test]
fn monotone_grammar_is_phrase_concatenation() {
    let spec = CorpusSpec { reorder_prob: 0.0, many_to_one: 0.0, train: 50, dev: 5, test: 5, ..CorpusSpec::default() };
    let c = generate(&spec).unwrap();
    assert!(c.grammar.rules.iter().all(|r| r.kind == RuleKind::Identity));
    for e in c.train.iter().chain(&c.dev).chain(&c.test) {
        let words: Vec<&str> =
            e.gestures.iter().flat_map(|&g| c.grammar.phrases[g].iter().map(|&w| c.grammar.words[w].as_str())).collect();
        assert_eq!(e.reference, words.join(" "));
    }
}

#[test]
fn files_hold_requested_counts_and_are_reproducible() {
    let spec = CorpusSpec { train: 100, dev: 20, test: 20, seed: 5, ..CorpusSpec::default() };
    let (a, b) = (scratch("corpus-a"), scratch("corpus-b"));
    write_corpus(&a, &generate(&spec).unwrap()).unwrap();
    write_corpus(&b, &generate(&spec).unwrap()).unwrap();
    for (split, n) in [("train", 100), ("dev", 20), ("test", 20)] {
        assert_eq!(read_split(&a, split).unwrap().len(), n);
    }
    let mut names: Vec<_> = std::fs::read_dir(&a).unwrap().map(|e| e.unwrap().file_name()).collect();
    names.sort();
    assert!(names.len() >= 6);
    for n in names {
        assert_eq!(std::fs::read(a.join(&n)).unwrap(), std::fs::read(b.join(&n)).unwrap(), "{n:?}");
    }
    let back = read_corpus(&a).unwrap();
    assert_eq!(back.train, generate(&spec).unwrap().train);
    assert_eq!(read_split(&a, "nope").unwrap_err().kind(), "missing");
    std::fs::remove_dir_all(&a).ok();
    std::fs::remove_dir_all(&b).ok();
}

#[test]
fn copy_reference_outputs_score_100() {
    let c = generate(&CorpusSpec { train: 30, dev: 5, test: 5, ..CorpusSpec::default() }).unwrap();
    let items: Vec<_> = c.train.iter().map(|e| (e.id.clone(), e.reference.clone(), e.reference.clone())).collect();
    let ev = score_outputs(&items).unwrap();
    let r = &ev.report;
    for v in [r.bleu_1, r.bleu_2, r.bleu_3, r.bleu_4, r.rouge_l] {
        assert_eq!(format!("{v:.2}"), "100.00");
    }
    assert!(ev.rows.iter().all(|row| row.rouge_l == 100.0));
    let tsv = ev.to_tsv();
    assert_eq!(tsv.lines().count(), items.len() + 1);
    assert_eq!(tsv.lines().next().unwrap(), "id\treference\thypothesis\tbleu4\trouge_l");
}

/// Ten examples used as both training and selection set.
fn overfit_run() -> (Corpus, Checkpoint) {
    let cfg = RunConfig::parse(
        "seed = 1
         corpus.train = 10
         corpus.dev = 1
         corpus.test = 1
         pretrain.epochs = 60
         sft.epochs = 60
         sft.lr = 3e-3
         sft.projector_lr = 3e-3",
    )
    .unwrap();
    let mut corpus = generate(&cfg.corpus).unwrap();
    corpus.dev = corpus.train.clone();
    let pre = run_pretrain(&cfg, &corpus).unwrap();
    let sft = run_sft(&cfg, &corpus, &pre.checkpoint).unwrap();
    (corpus, sft.checkpoint)
}

#[test]
fn sft_memorizes_a_tiny_corpus_and_evaluation_is_deterministic() {
    let (corpus, ck) = overfit_run();
    let a = evaluate(&ck, &corpus.train).unwrap();
    assert_eq!(format!("{:.2}", a.report.bleu_4), "100.00", "{}", a.to_tsv());
    let b = evaluate(&Checkpoint::from_bytes(&ck.to_bytes()).unwrap(), &corpus.train).unwrap();
    assert_eq!(a.to_tsv(), b.to_tsv());
    assert_eq!(evaluate(&ck, &corpus.train[..0]).unwrap_err().kind(), "metric");
}

/// Delegates to a translation task but pays every candidate the same.
struct Flat<'a>(TranslationTask<'a>);

impl RlTask for Flat<'_> {
    fn num_prompts(&self) -> usize {
        self.0.num_prompts()
    }
    fn adapters(&self) -> Option<&AdapterSpec> {
        self.0.adapters()
    }
    fn sample(&self, p: &ParamStore, prompt: usize, n: usize, seed: u64) -> Result<Vec<Vec<usize>>, GrpoError> {
        self.0.sample(p, prompt, n, seed)
    }
    fn log_probs(&self, p: &ParamStore, prompt: usize, tokens: &[usize]) -> Result<Vec<f64>, GrpoError> {
        self.0.log_probs(p, prompt, tokens)
    }
    fn log_probs_var(&self, s: &mut Scope, prompt: usize, tokens: &[usize]) -> Result<Var, GrpoError> {
        self.0.log_probs_var(s, prompt, tokens)
    }
    fn reward(&self, _: usize, _: &[usize]) -> Result<f64, GrpoError> {
        Ok(42.0)
    }
}

#[test]
fn rft_without_signal_leaves_parameters_unchanged() {
    let cfg = RunConfig::parse("corpus.train = 16\ncorpus.dev = 4\ncorpus.test = 4\npretrain.epochs = 1\nsft.epochs = 1").unwrap();
    let corpus = generate(&cfg.corpus).unwrap();
    let pre = run_pretrain(&cfg, &corpus).unwrap();
    let sft = run_sft(&cfg, &corpus, &pre.checkpoint).unwrap().checkpoint;
    assert!(Meta::of(&sft).unwrap().merged);
    let vocab: Vocabulary = vocabulary(&corpus);
    let train = prepare(&corpus.train, &vocab).unwrap();
    let policy = policy_for(&cfg, vocab.len());
    let spec = rft_adapters(&cfg);
    let mut start = sft.params.clone();
    start.extend_from(&init_adapters(&sft.params, &spec, &mut ChaCha8Rng::seed_from_u64(0)).unwrap());
    let pre_fix = prefixes(&sft.params, &train, &Default::default()).unwrap();
    let task = Flat(TranslationTask {
        policy: &policy,
        prefixes: &pre_fix,
        targets: train.iter().map(|e| e.words().to_vec()).collect(),
        adapters: &spec,
        reward: reward_config(&cfg),
        sampling: DecodeConfig { beam_width: 1, max_len: 20, temperature: 1.0 },
        bos: vocab.bos(),
        eos: vocab.eos(),
    });
    // the policy is its own reference; with no KL term nothing can move it
    let mut triple = PolicyTriple::new(start.clone(), start.clone());
    let gcfg = GrpoConfig { kl_coefficient: 0.0, lr: 1e-2, epochs: 1, ..GrpoConfig::default() };
    let log = rft_train(&task, &mut triple, &gcfg, 3, |_, _| Ok(())).unwrap();
    assert_eq!(log.records.len(), 4);
    assert_eq!(triple.theta, start);
}
