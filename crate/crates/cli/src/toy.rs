//! A small deterministic fixture for exercising every command offline.
//!
//! The replay store is produced by running the real pipelines against a
//! scripted generator through a recording backend, so the stored request
//! hashes are exactly those a later replay run will ask for.

use std::collections::{BTreeSet, HashMap};
use std::path::Path;
use std::sync::Arc;

use debias_core::corpus::{
    BiasLabel, ClassificationRecord, DatasetSplit, DetectionRecord, MitigationRecord, SplitName,
};
use debias_core::cot::{
    escape_field, render_classification_response, render_detection_response, run_task,
    ClassificationResult, Classify, Detect, DetectionResult, LabelJudgment, Rewrite,
};
use debias_core::lmclient::{
    ChatRequest, ChatResponse, ClientError, FnBackend, RecordingBackend, ReplayStore,
};
use debias_core::par::Exec;
use debias_core::prefgen::build_preference_pairs;
use debias_core::template::TemplateSet;

use crate::config::RunConfig;

pub const CONFIG_FILE: &str = "toy.toml";
pub const MITIGATE_TRAIN: &str = "mitigate_train.jsonl";
pub const MITIGATE_TEST: &str = "mitigate_test.jsonl";
pub const DETECT_TEST: &str = "detect_test.jsonl";
pub const CLASSIFY_TEST: &str = "classify_test.jsonl";
pub const REPLAY_STORE: &str = "replay.jsonl";

/// Configuration written next to the fixture. The toy run needs a far larger
/// learning rate than the defaults, which target billion-parameter models.
pub const TOY_CONFIG: &str = r#"# Toy fixture configuration.
[run]
seed = 42

[paths]
replay_store = "replay.jsonl"

[client]
backend = "replay"
model_name = "toy-generator"

[toy]
init = "random"
init_scale = 0.5

[dpo]
beta = 0.1
learning_rate = 0.5
epochs = 8
batch_size = 4
max_grad_norm = 5.0
warmup_ratio = 0.03

[rm]
learning_rate = 0.5
epochs = 8
batch_size = 4
max_grad_norm = 5.0

[decode]
max_len = 32
candidate_topk = 10
w = 1.0

[prefgen]
prompt_style = "raw"
"#;

const GROUPS: [&str; 6] = ["he", "she", "men", "women", "girls", "boys"];
const JOBS: [&str; 8] = [
    "nurse", "pilot", "chef", "judge", "coder", "baker", "medic", "tutor",
];

/// Biased sentences and their neutral rewrites; every fourth combination is
/// held out for testing.
pub fn mitigation_records() -> (Vec<MitigationRecord>, Vec<MitigationRecord>) {
    let (mut train, mut test) = (Vec::new(), Vec::new());
    for (gi, g) in GROUPS.iter().enumerate() {
        for (ji, job) in JOBS.iter().enumerate() {
            let rec = MitigationRecord {
                id: format!("m{gi}{ji}"),
                biased_text: format!("{g} can not be a {job}"),
                edited_text: format!("anyone can be a {job}"),
            };
            if (gi + ji) % 4 == 0 {
                test.push(rec);
            } else {
                train.push(rec);
            }
        }
    }
    (train, test)
}

const SUBJECTS: [&str; 6] = ["数学", "物理", "编程", "化学", "驾驶", "管理"];

pub fn detection_records() -> Vec<DetectionRecord> {
    (0..24)
        .map(|i| {
            let s = SUBJECTS[i % SUBJECTS.len()];
            let (text, label) = if i % 2 == 0 {
                (format!("女生天生学不好{s}; 这是常识{i}"), true)
            } else {
                (format!("小王今天复习了{s}\n准备考试{i}"), false)
            };
            DetectionRecord {
                id: format!("d{i:02}"),
                text,
                label,
            }
        })
        .collect()
}

pub fn classification_records() -> Vec<ClassificationRecord> {
    use BiasLabel::*;
    let patterns: [&[BiasLabel]; 6] = [&[AC], &[DI], &[ANB], &[AC, DI], &[DI, ANB], &[]];
    (0..24)
        .map(|i| ClassificationRecord {
            id: format!("c{i:02}"),
            text: format!("关于性别的句子{i}: {}", SUBJECTS[i % SUBJECTS.len()]),
            labels: patterns[i % patterns.len()].iter().copied().collect(),
        })
        .collect()
}

/// Attempt number of a request: 1 for the first turn, 2 after one
/// corrective exchange, and so on.
fn attempt(req: &ChatRequest) -> usize {
    req.messages.len().div_ceil(2)
}

fn sentence_line(req: &ChatRequest) -> &str {
    req.messages[0].content.lines().nth(3).unwrap_or("")
}

fn detection_answer(rec: &DetectionRecord, attempt: usize) -> Result<String, ClientError> {
    let n: usize = rec.id[1..].parse().unwrap_or(0);
    match n {
        5 => return Ok("The sentence seems biased to me.".into()),
        8 if attempt == 1 => return Ok("Step1: Group: 女生\nLabel: True".into()),
        13 => {
            return Err(ClientError::Transport {
                message: "scripted outage".into(),
                attempts: 1,
            })
        }
        _ => {}
    }
    let label = if n == 3 || n == 10 {
        !rec.label
    } else {
        rec.label
    };
    Ok(render_detection_response(&DetectionResult {
        group: if rec.label {
            "女生".into()
        } else {
            "小王".into()
        },
        attribute: "学习能力".into(),
        statement_is_biased: label,
        sentence_agrees: true,
        label,
    }))
}

fn classification_answer(
    rec: &ClassificationRecord,
    attempt: usize,
) -> Result<String, ClientError> {
    let n: usize = rec.id[1..].parse().unwrap_or(0);
    let mut applies: BTreeSet<BiasLabel> = rec.labels.clone();
    match n {
        2 => {
            applies.pop_first();
        }
        7 => {
            applies.insert(BiasLabel::ANB);
        }
        9 => return Ok("AC seems right.".into()),
        15 if attempt == 1 => return Ok("Final: AC".into()),
        _ => {}
    }
    let judgments = BiasLabel::ALL
        .iter()
        .map(|&label| LabelJudgment {
            label,
            justification: format!("{} 的判断", label.description()),
            applies: applies.contains(&label),
        })
        .collect();
    let mut final_labels = applies;
    if n == 4 {
        // Synthesis disagrees with the per-label decisions.
        final_labels.insert(BiasLabel::AC);
        final_labels.remove(&BiasLabel::DI);
    }
    Ok(render_classification_response(&ClassificationResult {
        judgments,
        final_labels,
    }))
}

fn rewrite_answer(rec: &MitigationRecord, attempt: usize) -> String {
    let n: usize = rec.id[1..].parse().unwrap_or(0);
    match n % 3 {
        _ if (n == 13 || n == 21) && attempt == 1 => String::new(),
        0 => rec.edited_text.clone(),
        1 => rec.edited_text.replace("anyone", "everyone"),
        _ => rec.biased_text.replace("can not", "can"),
    }
}

fn counterfactual_answer(first_line: &str, biased: &str) -> String {
    let (group, rest) = biased.split_once(" can not be ").unwrap_or((biased, ""));
    if first_line.contains("Keep its gender-biased wording") {
        format!("{group} must be a {}", rest.trim_start_matches("a "))
    } else if first_line.contains("Replace its gender-biased wording") {
        format!("anyone can not be {rest}")
    } else {
        format!("{group} should not be {rest}")
    }
}

/// Deterministic stand-in for a hosted generator.
pub fn scripted_generator(
) -> FnBackend<impl Fn(&ChatRequest) -> Result<ChatResponse, ClientError> + Send + Sync> {
    let (train, test) = mitigation_records();
    let mitig: HashMap<String, MitigationRecord> = train
        .into_iter()
        .chain(test)
        .map(|r| (r.biased_text.clone(), r))
        .collect();
    let detect: HashMap<String, DetectionRecord> = detection_records()
        .into_iter()
        .map(|r| (escape_field(&r.text), r))
        .collect();
    let classify: HashMap<String, ClassificationRecord> = classification_records()
        .into_iter()
        .map(|r| (escape_field(&r.text), r))
        .collect();
    FnBackend::new("scripted-toy-generator", move |req: &ChatRequest| {
        let first = req.messages[0].content.lines().next().unwrap_or("");
        let key = sentence_line(req);
        let unknown =
            || ClientError::InvalidRequest(format!("scripted generator has no answer for `{key}`"));
        let text = if first.starts_with("You are auditing") {
            detection_answer(detect.get(key).ok_or_else(unknown)?, attempt(req))?
        } else if first.starts_with("You are classifying") {
            classification_answer(classify.get(key).ok_or_else(unknown)?, attempt(req))?
        } else if first.contains("no longer contains gender bias") {
            rewrite_answer(mitig.get(key).ok_or_else(unknown)?, attempt(req))
        } else {
            counterfactual_answer(first, &mitig.get(key).ok_or_else(unknown)?.biased_text)
        };
        Ok(ChatResponse::stop(text))
    })
}

#[derive(Debug, thiserror::Error)]
pub enum ToyError {
    #[error("writing {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("toy fixture: {0}")]
    Build(String),
}

/// Write the fixture files and record the replay store into `dir`.
pub fn write_fixture(dir: &Path) -> Result<(), ToyError> {
    let io = |p: &Path| {
        let path = p.display().to_string();
        move |source| ToyError::Io { path, source }
    };
    let build = |e: &dyn std::fmt::Display| ToyError::Build(e.to_string());
    std::fs::create_dir_all(dir).map_err(io(dir))?;
    let write = |name: &str, text: &str| {
        let p = dir.join(name);
        std::fs::write(&p, text).map_err(io(&p))
    };

    let (train, test) = mitigation_records();
    let train = DatasetSplit::new(SplitName::Train, train).map_err(|e| build(&e))?;
    let test = DatasetSplit::new(SplitName::Test, test).map_err(|e| build(&e))?;
    let detect = DatasetSplit::new(SplitName::Test, detection_records()).map_err(|e| build(&e))?;
    let classify =
        DatasetSplit::new(SplitName::Test, classification_records()).map_err(|e| build(&e))?;
    write(MITIGATE_TRAIN, &train.to_jsonl())?;
    write(MITIGATE_TEST, &test.to_jsonl())?;
    write(DETECT_TEST, &detect.to_jsonl())?;
    write(CLASSIFY_TEST, &classify.to_jsonl())?;
    write(CONFIG_FILE, TOY_CONFIG)?;

    let config = RunConfig::from_toml_with(TOY_CONFIG, &[]).map_err(|e| build(&e))?;
    let store_path = dir.join(REPLAY_STORE);
    if store_path.exists() {
        std::fs::remove_file(&store_path).map_err(io(&store_path))?;
    }
    let store = Arc::new(ReplayStore::open(&store_path).map_err(|e| build(&e))?);
    let recorder = RecordingBackend::new(scripted_generator(), store, false);
    let templates = TemplateSet::builtin();
    // Sequential, so the store's line order is reproducible.
    let exec = Exec::Sequential;
    build_preference_pairs(
        &train,
        &recorder,
        &templates,
        &config.prefgen_config(),
        exec,
    )
    .map_err(|e| build(&e))?;
    let cot = config.pipeline_config();
    run_task::<Detect>(&detect, &recorder, &templates, &cot, exec).map_err(|e| build(&e))?;
    run_task::<Classify>(&classify, &recorder, &templates, &cot, exec).map_err(|e| build(&e))?;
    run_task::<Rewrite>(&train, &recorder, &templates, &cot, exec).map_err(|e| build(&e))?;
    run_task::<Rewrite>(&test, &recorder, &templates, &cot, exec).map_err(|e| build(&e))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn splits_are_disjoint_and_sized() {
        let (train, test) = mitigation_records();
        assert_eq!(train.len() + test.len(), GROUPS.len() * JOBS.len());
        assert!(train.len() * 3 >= 50);
        let ids: BTreeSet<_> = train.iter().chain(&test).map(|r| r.id.clone()).collect();
        assert_eq!(ids.len(), train.len() + test.len());
        assert!(detection_records().len() >= 20 && classification_records().len() >= 20);
    }

    #[test]
    fn counterfactuals_follow_kind() {
        let b = "he can not be a chef";
        assert_eq!(
            counterfactual_answer(
                "Rewrite the following Chinese sentence. Keep its gender-biased wording",
                b
            ),
            "he must be a chef"
        );
        assert_eq!(
            counterfactual_answer(
                "Rewrite the following Chinese sentence. Replace its gender-biased wording",
                b
            ),
            "anyone can not be a chef"
        );
        assert_eq!(
            counterfactual_answer("Rephrase the following Chinese sentence.", b),
            "he should not be a chef"
        );
    }

    #[test]
    fn fixture_is_reproducible() {
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        write_fixture(a.path()).unwrap();
        write_fixture(b.path()).unwrap();
        for name in [REPLAY_STORE, MITIGATE_TRAIN, DETECT_TEST, CONFIG_FILE] {
            let x = std::fs::read(a.path().join(name)).unwrap();
            let y = std::fs::read(b.path().join(name)).unwrap();
            assert_eq!(x, y, "{name}");
        }
    }
}
