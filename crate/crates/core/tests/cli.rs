use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use rft_core::cli::{read_jsonl, DatasetRecord, EvalReport, ScoreRecord};
use rft_core::envs::training::BanditEnv;
use rft_core::grpo::{read_telemetry, Environment, PolicyCheckpoint, Provenance};
use rft_core::policy::TabularSeqPolicy;
use rft_core::response::StructuredResponse;
use rft_core::ResponseTemplate;

fn rft(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_rft")).args(args).output().expect("run rft")
}

fn ok(args: &[&str]) -> String {
    let out = rft(args);
    assert!(out.status.success(), "rft {args:?}: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

struct Tmp(tempfile::TempDir);

impl Tmp {
    fn new() -> Self {
        Tmp(tempfile::tempdir().unwrap())
    }
    fn path(&self, name: &str) -> PathBuf {
        self.0.path().join(name)
    }
    fn s(&self, name: &str) -> String {
        self.path(name).to_string_lossy().into_owned()
    }
    fn write(&self, name: &str, text: &str) -> String {
        fs::write(self.path(name), text).unwrap();
        self.s(name)
    }
}

fn train(t: &Tmp, name: &str, config: &str) -> PathBuf {
    let cfg = t.write(&format!("{name}.toml"), config);
    ok(&["train", "--config", &cfg, "--out-dir", &t.s(name)]);
    t.path(name)
}

#[test]
fn gen_zero_records_is_empty() {
    let t = Tmp::new();
    ok(&["gen", "--task", "counting", "--n", "0", "--seed", "1", "--out", &t.s("c.jsonl")]);
    assert_eq!(fs::read(t.path("c.jsonl")).unwrap(), b"");
}

#[test]
fn gen_counting_stratifies_exactly() {
    let t = Tmp::new();
    let cfg = t.write("mix.toml", "[kind_mix]\nadversarial = 1.0\naddition = 1.0\nsubtraction = 1.0\nmultihop = 1.0\n");
    ok(&["gen", "--task", "counting", "--n", "1000", "--seed", "5", "--config", &cfg, "--out", &t.s("c.jsonl")]);
    let records: Vec<DatasetRecord> = read_jsonl(&t.path("c.jsonl")).unwrap();
    assert_eq!(records.len(), 1000);
    assert_eq!(records.iter().filter(|r| r.subset == "adversarial").count(), 250);
}

#[test]
fn gen_rejects_infeasible_config() {
    let t = Tmp::new();
    let cfg = t.write("bad.toml", "min_objects = 5\nmax_objects = 2\n");
    let out = rft(&["gen", "--task", "counting", "--n", "3", "--config", &cfg, "--out", &t.s("c.jsonl")]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("min_objects"));
}

fn gold(r: &DatasetRecord, template: ResponseTemplate) -> String {
    let resp = StructuredResponse::new("look", r.answer.answer_text()).with_summary_caption("s", "c");
    resp.render(template)
}

#[test]
fn gold_predictions_score_perfectly() {
    let t = Tmp::new();
    for task in ["counting", "numeric_qa", "trance"] {
        let data = t.s(&format!("{task}.jsonl"));
        ok(&["gen", "--task", task, "--n", "40", "--seed", "2", "--out", &data]);
        let records: Vec<DatasetRecord> = read_jsonl(Path::new(&data)).unwrap();
        let preds: String = records
            .iter()
            .map(|r| serde_json::json!({"id": r.id, "output_text": gold(r, ResponseTemplate::ThinkAnswer)}).to_string() + "\n")
            .collect();
        let pred = t.write(&format!("{task}.pred.jsonl"), &preds);
        let summary = ok(&["score", "--pred", &pred, "--data", &data, "--out", &t.s("scores.jsonl")]);
        assert!(summary.contains("Acc            1.0000"), "{task}: {summary}");
        let scores: Vec<ScoreRecord> = read_jsonl(&t.path("scores.jsonl")).unwrap();
        assert!(scores.iter().all(|s| s.total == 2.0));
    }
}

#[test]
fn empty_predictions_on_empty_dataset() {
    let t = Tmp::new();
    let data = t.write("d.jsonl", "");
    let pred = t.write("p.jsonl", "");
    ok(&["score", "--pred", &pred, "--data", &data, "--out", &t.s("s.jsonl")]);
    assert_eq!(fs::read(t.path("s.jsonl")).unwrap(), b"");
}

#[test]
fn mixed_predictions_give_exact_score_lines() {
    let t = Tmp::new();
    let data = t.write(
        "d.jsonl",
        concat!(
            r#"{"id":"seq","task":"trance","context":"c","question":"q","answer":{"kind":"function_seq","steps":["change_color(o1, red)","change_position(o2, (1,2))","change_size(o3, small)","change_shape(o4, cube)"]},"subset":"level-4"}"#,
            "\n",
            r#"{"id":"num","task":"numeric_qa","context":"c","question":"q","answer":{"kind":"numeric","value":100.0},"subset":"numeric"}"#,
            "\n",
            r#"{"id":"choice","task":"numeric_qa","context":"c","question":"q","answer":{"kind":"discrete","value":"C","options":["A","B","C","D"]},"subset":"choice"}"#,
            "\n",
            r#"{"id":"bad","task":"counting","context":"c","question":"q","answer":{"kind":"discrete","value":"3"},"subset":"addition"}"#,
            "\n",
        ),
    );
    let pred = t.write(
        "p.jsonl",
        concat!(
            r#"{"id":"seq","output_text":"<think>t</think><answer>change_color(o1, red), change_position(o2, (1,2)), change_size(o3, large), change_shape(o0, sphere)</answer>"}"#,
            "\n",
            r#"{"id":"num","output_text":"<think>t</think><answer>112.5</answer>"}"#,
            "\n",
            r#"{"id":"choice","output_text":"<think>t</think><answer>(c)</answer>"}"#,
            "\n",
            r#"{"id":"bad","output_text":"<answer>3</answer><think>t</think>"}"#,
            "\n",
        ),
    );
    let reward = t.write("r.toml", "alpha = 0.5\nbeta = 0.25\n");
    let summary = ok(&["score", "--pred", &pred, "--data", &data, "--reward-config", &reward, "--out", &t.s("s.jsonl")]);
    let lines = fs::read_to_string(t.path("s.jsonl")).unwrap();
    assert_eq!(
        lines,
        concat!(
            r#"{"id":"seq","format":1.0,"accuracy":0.6875,"total":1.6875}"#,
            "\n",
            r#"{"id":"num","format":1.0,"accuracy":0.5,"total":1.5}"#,
            "\n",
            r#"{"id":"choice","format":1.0,"accuracy":1.0,"total":2.0}"#,
            "\n",
            r#"{"id":"bad","format":0.0,"accuracy":0.0,"total":0.0}"#,
            "\n",
        )
    );
    // Acc recounted from the records: only "choice" is an exact hit.
    assert!(summary.contains("Acc            0.2500"), "{summary}");
}

#[test]
fn unmatched_prediction_ids_fail() {
    let t = Tmp::new();
    ok(&["gen", "--task", "numeric_qa", "--n", "2", "--out", &t.s("d.jsonl")]);
    let pred = t.write("p.jsonl", "{\"id\":\"ghost\",\"output_text\":\"\"}\n");
    let out = rft(&["score", "--pred", &pred, "--data", &t.s("d.jsonl"), "--out", &t.s("s.jsonl")]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("ghost"));
}

#[test]
fn one_step_training_is_reproducible() {
    let t = Tmp::new();
    let config = "seed = 11\nsteps = 1\nstage_schedule = \"rl_only\"\n\n[env]\nkind = \"trance_mini\"\npool = 8\n";
    let a = train(&t, "a", config);
    let b = train(&t, "b", config);
    let rows = read_telemetry(&a.join("telemetry.csv")).unwrap();
    assert_eq!(rows.len(), 1);
    assert_eq!(fs::read(a.join("telemetry.csv")).unwrap(), fs::read(b.join("telemetry.csv")).unwrap());
    assert_eq!(fs::read(a.join("post_rl.ckpt.json")).unwrap(), fs::read(b.join("post_rl.ckpt.json")).unwrap());
}

#[test]
fn sft_only_leaves_kl_empty() {
    let t = Tmp::new();
    let dir = train(&t, "s", "sft_steps = 3\nstage_schedule = \"sft_only\"\n\n[env]\nkind = \"trance_mini\"\npool = 8\n");
    let text = fs::read_to_string(dir.join("telemetry.csv")).unwrap();
    let rows: Vec<&str> = text.lines().skip(1).collect();
    assert_eq!(rows.len(), 3);
    for row in rows {
        let fields: Vec<&str> = row.split(',').collect();
        assert_eq!(fields[1], "sft");
        assert_eq!(fields[6], "", "{row}");
    }
    assert!(dir.join("post_sft.ckpt.json").exists());
    assert!(!dir.join("post_rl.ckpt.json").exists());
}

#[test]
fn bandit_training_reaches_optimum() {
    let t = Tmp::new();
    let dir = train(&t, "b", "steps = 1500\nstage_schedule = \"rl_only\"\n\n[env]\nkind = \"bandit\"\narms = 10\ncontexts = 4\nseed = 8\n");
    let env = BanditEnv::new(10, 4, 8).unwrap();
    let optimum: f64 = env.arm_values().iter().map(|v| v.iter().copied().fold(f64::MIN, f64::max)).sum::<f64>() / 4.0;
    let rows = read_telemetry(&dir.join("telemetry.csv")).unwrap();
    let last = rows.last().unwrap().mean_total_reward;
    assert!(last >= 0.95 * optimum, "{last} vs {optimum}");
}

#[test]
fn invalid_train_config_names_the_field() {
    let t = Tmp::new();
    let cfg = t.write("bad.toml", "group_size = 1\n\n[env]\nkind = \"bandit\"\n");
    let out = rft(&["train", "--config", &cfg, "--out-dir", &t.s("o")]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("group_size"));
    let cfg = t.write("typo.toml", "stepz = 3\n\n[env]\nkind = \"bandit\"\n");
    let out = rft(&["train", "--config", &cfg, "--out-dir", &t.s("o")]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("stepz"));
}

fn report(path: &Path) -> EvalReport {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

#[test]
fn sft_converged_policy_recalls_its_demos() {
    let t = Tmp::new();
    let dir = train(&t, "s", "sft_steps = 200\nstage_schedule = \"sft_only\"\n\n[env]\nkind = \"trance_mini\"\npool = 32\n");
    let table = ok(&[
        "eval",
        "--ckpt",
        &dir.join("post_sft.ckpt.json").to_string_lossy(),
        "--data",
        &dir.join("pool.jsonl").to_string_lossy(),
        "--out",
        &t.s("r.json"),
    ]);
    let r = report(&t.path("r.json"));
    assert_eq!(r.count, 32);
    assert_eq!(r.macro_avg, 1.0, "{table}");
    // One subset: the average is that subset's accuracy.
    assert_eq!(r.subsets.len(), 1);
    assert_eq!(r.subsets.values().next().unwrap().acc, r.macro_avg);
}

#[test]
fn uniform_policy_scores_nothing() {
    let t = Tmp::new();
    let dir = train(&t, "s", "sft_steps = 1\nstage_schedule = \"sft_only\"\n\n[env]\nkind = \"trance_mini\"\npool = 64\n");
    let trained = PolicyCheckpoint::load(&dir.join("post_sft.ckpt.json")).unwrap();
    let p = &trained.policy;
    let uniform = PolicyCheckpoint {
        policy: TabularSeqPolicy::uniform(p.vocab().clone(), p.horizon(), p.buckets()),
        provenance: Provenance::Init,
        config_hash: trained.config_hash.clone(),
    };
    uniform.save(&t.path("uniform.ckpt.json")).unwrap();
    ok(&[
        "eval",
        "--ckpt",
        &t.s("uniform.ckpt.json"),
        "--data",
        &dir.join("pool.jsonl").to_string_lossy(),
        "--out",
        &t.s("r.json"),
    ]);
    assert!(report(&t.path("r.json")).macro_avg < 0.01);
}

#[test]
fn eval_rejects_foreign_vocabulary() {
    let t = Tmp::new();
    let dir = train(&t, "s", "sft_steps = 1\nstage_schedule = \"sft_only\"\n\n[env]\nkind = \"trance_mini\"\npool = 8\n");
    ok(&["gen", "--task", "trance", "--n", "5", "--out", &t.s("d.jsonl")]);
    let out = rft(&["eval", "--ckpt", &dir.join("post_sft.ckpt.json").to_string_lossy(), "--data", &t.s("d.jsonl")]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("not expressible"));
}

#[test]
fn missing_input_is_a_runtime_error() {
    let t = Tmp::new();
    let out = rft(&["score", "--pred", &t.s("nope.jsonl"), "--data", &t.s("nope.jsonl"), "--out", &t.s("s.jsonl")]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn pool_records_match_environment() {
    let t = Tmp::new();
    let dir = train(&t, "b", "steps = 1\n\n[env]\nkind = \"bandit\"\ncontexts = 3\n");
    let pool: Vec<DatasetRecord> = read_jsonl(&dir.join("pool.jsonl")).unwrap();
    let env = BanditEnv::new(10, 3, 0).unwrap();
    assert_eq!(pool.iter().map(|r| r.to_instance()).collect::<Vec<_>>(), env.instances());
}
