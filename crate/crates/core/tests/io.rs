use std::io::Write;

use ctxrank::eval::{evaluate, QrelSet};
use ctxrank::inference::{read_run, rerank_batch, write_run};
use ctxrank::io::{
    load_candidates, load_checkpoint, load_checkpoint_expecting, load_training_records,
    save_checkpoint,
};
use ctxrank::synthetic::ContextTask;
use ctxrank::{CheckpointError, Error, ModelConfig, ModelWeights};

fn candidate_line(qid: &str, dim: usize, k: usize) -> String {
    let emb = |seed: usize| {
        let v: Vec<String> = (0..dim)
            .map(|i| format!("{}", ((seed * 31 + i) % 7) as f64 * 0.1))
            .collect();
        format!("[{}]", v.join(","))
    };
    let cands: Vec<String> = (0..k)
        .map(|i| {
            format!(
                r#"{{"passage_id":"{qid}-p{i}","doc_key":"d{}","chunk_index":{i},"embedding":{}}}"#,
                i % 3,
                emb(i + 1)
            )
        })
        .collect();
    format!(
        r#"{{"query_id":"{qid}","query_embedding":{},"candidates":[{}]}}"#,
        emb(0),
        cands.join(",")
    )
}

fn write_lines(lines: &[String]) -> tempfile::NamedTempFile {
    let mut f = tempfile::NamedTempFile::new().unwrap();
    for l in lines {
        writeln!(f, "{l}").unwrap();
    }
    f
}

#[test]
fn loads_valid_file() {
    let f = write_lines(&[candidate_line("q1", 4, 3)]);
    let sets = load_candidates(f.path(), None, 20).unwrap();
    assert_eq!(sets.len(), 1);
    assert_eq!(sets[0].len(), 3);
    assert_eq!(sets[0].dim(), 4);
}

#[test]
fn short_embedding_reports_line_and_both_dims() {
    let f = write_lines(&[candidate_line("q1", 768, 2), candidate_line("q2", 767, 2)]);
    let err = load_candidates(f.path(), Some(768), 20).unwrap_err();
    match &err {
        Error::InRecord { line, source, .. } => {
            assert_eq!(*line, 2);
            assert!(matches!(
                **source,
                Error::DimensionMismatch {
                    expected: 768,
                    found: 767,
                    ..
                }
            ));
        }
        other => panic!("unexpected {other:?}"),
    }
    let msg = err.to_string();
    assert!(
        msg.contains(":2:") && msg.contains("768") && msg.contains("767"),
        "{msg}"
    );
}

#[test]
fn oversized_set_is_rejected_with_count() {
    let f = write_lines(&[candidate_line("q1", 4, 25)]);
    let err = load_candidates(f.path(), None, 20).unwrap_err();
    assert!(err.to_string().contains("25"), "{err}");
    // Training records are not capped at load; the cap applies when instances are built.
    assert_eq!(load_training_records(f.path(), None).unwrap().len(), 1);
}

#[test]
fn duplicate_chunk_in_set_is_rejected() {
    let line = candidate_line("q1", 4, 4).replace(r#""chunk_index":3"#, r#""chunk_index":0"#);
    let f = write_lines(&[line]);
    let err = load_candidates(f.path(), None, 20).unwrap_err();
    assert!(
        matches!(&err, Error::InRecord { source, .. } if matches!(**source, Error::DuplicatePassage { .. })),
        "{err:?}"
    );
}

#[test]
fn checkpoint_depth_mismatch_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    let config = ModelConfig {
        dim: 16,
        layers: 16,
        heads: 2,
        ffn_dim: 8,
        ..ModelConfig::default()
    };
    save_checkpoint(&ModelWeights::<f32>::init(config.clone()).unwrap(), &path).unwrap();
    let expected = ModelConfig {
        layers: 12,
        ..config.clone()
    };
    let err = load_checkpoint_expecting::<f32>(&path, &expected).unwrap_err();
    assert!(
        matches!(err, Error::Checkpoint(CheckpointError::ConfigMismatch(_))),
        "{err:?}"
    );
    assert!(err.to_string().contains("16") && err.to_string().contains("12"));
    assert_eq!(
        load_checkpoint_expecting::<f32>(&path, &config)
            .unwrap()
            .config,
        config
    );
}

#[test]
fn missing_checkpoint_is_io_error() {
    assert!(matches!(
        load_checkpoint::<f32>("/no/such/file".as_ref()),
        Err(Error::Io(_))
    ));
}

#[test]
fn metrics_survive_run_file_round_trip() {
    let sets = ContextTask {
        queries: 30,
        dim: 8,
        ..ContextTask::default()
    }
    .generate()
    .unwrap();
    let weights = ModelWeights::<f32>::init(ModelConfig {
        dim: 8,
        layers: 2,
        heads: 2,
        ffn_dim: 8,
        k_max: 8,
        ..ModelConfig::default()
    })
    .unwrap();
    let lists = rerank_batch(&sets, &weights).unwrap();
    let qrels = QrelSet::from_candidate_sets(&sets);
    let mut buf = Vec::new();
    write_run(&mut buf, &lists, "t").unwrap();
    let reparsed = read_run(buf.as_slice(), "mem".as_ref()).unwrap();
    assert_eq!(reparsed, lists);
    assert_eq!(
        evaluate(&reparsed, &qrels, 10),
        evaluate(&lists, &qrels, 10)
    );
}
