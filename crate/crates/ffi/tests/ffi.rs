use std::ffi::{CStr, CString};
use std::path::PathBuf;
use std::process::Command;
use std::ptr;

use serde_json::json;
use spkxl::checkpoint;
use spkxl::dialogue::{Dialogue, SpeakerSet, Turn};
use spkxl::encoding::{build_window, Encoder, HistoryMode, SpeakerTokens, Vocab};
use spkxl::{ModelConfig, ModelParams};
use spkxl_ffi::*;

fn last_error() -> String {
    unsafe { CStr::from_ptr(spkxl_last_error()) }
        .to_string_lossy()
        .into_owned()
}

fn fixture() -> (Vocab, Encoder, Vec<Dialogue>) {
    let turn = |s: &str, text: &str, label: &str| Turn {
        speaker: s.into(),
        text: text.into(),
        labels: vec![label.into()],
    };
    let dialogues = vec![Dialogue {
        dialogue_id: "d".into(),
        turns: vec![
            turn("g", "Right, the hotel.", "FOL-EXPLAIN"),
            turn("t", "is it far", "QST-WHERE"),
            turn("g", "not far at all", "RES-WHERE"),
        ],
    }];
    let speakers = SpeakerSet::default();
    let vocab = Vocab::build(&dialogues, &speakers);
    let encoder = Encoder {
        vocab: vocab.clone(),
        speakers,
        speaker_tokens: SpeakerTokens::All,
        max_seq_len: 32,
    };
    (vocab, encoder, dialogues)
}

fn saved_model(dir: &tempfile::TempDir) -> (PathBuf, ModelParams, Vocab, Encoder, Vec<Dialogue>) {
    let (vocab, encoder, dialogues) = fixture();
    let config = ModelConfig {
        n_layers: 1,
        d_model: 16,
        n_heads: 2,
        d_ff: 32,
        vocab_size: vocab.len(),
        n_labels: vocab.n_labels(),
        max_seq_len: 32,
        relative_speaker_attention: true,
        speaker_tokens: SpeakerTokens::All,
        init_std: 0.3,
        seed: 5,
        ..ModelConfig::default()
    };
    let params = ModelParams::init(&config).unwrap();
    let path = dir.path().join("m.ckpt");
    checkpoint::save(&path, &params, &json!({ "vocab": vocab })).unwrap();
    (path, params, vocab, encoder, dialogues)
}

#[test]
fn relative_index_marks_same_speaker() {
    assert_eq!(spkxl_relative_index(0, 0), 1);
    assert_eq!(spkxl_relative_index(0, 1), 0);
    assert_eq!(spkxl_relative_index(2, 1), 0);
}

#[test]
fn missing_checkpoint_reports_io_and_path() {
    let path = CString::new("/nonexistent/model.ckpt").unwrap();
    let mut model = ptr::null_mut();
    let status = unsafe { spkxl_model_load(path.as_ptr(), &mut model) };
    assert_eq!(status, SpkxlStatus::Io);
    assert!(model.is_null());
    assert!(last_error().contains("/nonexistent/model.ckpt"), "{}", last_error());
}

#[test]
fn null_arguments_are_rejected() {
    let mut model = ptr::null_mut();
    assert_eq!(
        unsafe { spkxl_model_load(ptr::null(), &mut model) },
        SpkxlStatus::NullPointer
    );
    let mut n = 0usize;
    assert_eq!(
        unsafe { spkxl_model_num_labels(ptr::null(), &mut n) },
        SpkxlStatus::NullPointer
    );
    let mut g = 0.0;
    assert_eq!(unsafe { spkxl_gradcheck(0, ptr::null_mut()) }, SpkxlStatus::NullPointer);
    assert_eq!(unsafe { spkxl_gradcheck(1, &mut g) }, SpkxlStatus::Ok);
    assert!(g <= 1e-4, "{g}");
    unsafe { spkxl_model_free(ptr::null_mut()) };
}

#[test]
fn logits_match_the_library() {
    let dir = tempfile::tempdir().unwrap();
    let (path, params, vocab, encoder, dialogues) = saved_model(&dir);
    let cpath = CString::new(path.to_str().unwrap()).unwrap();
    let mut model = ptr::null_mut();
    assert_eq!(
        unsafe { spkxl_model_load(cpath.as_ptr(), &mut model) },
        SpkxlStatus::Ok,
        "{}",
        last_error()
    );

    let mut n = 0usize;
    assert_eq!(unsafe { spkxl_model_num_labels(model, &mut n) }, SpkxlStatus::Ok);
    assert_eq!(n, vocab.n_labels());
    for i in 0..n {
        let mut name = ptr::null();
        assert_eq!(unsafe { spkxl_model_label_name(model, i, &mut name) }, SpkxlStatus::Ok);
        assert_eq!(unsafe { CStr::from_ptr(name) }.to_str().unwrap(), vocab.label(i));
    }
    let mut name = ptr::null();
    assert_eq!(
        unsafe { spkxl_model_label_name(model, n, &mut name) },
        SpkxlStatus::OutOfRange
    );

    let tok = CString::new("t:").unwrap();
    let mut id = 0u32;
    assert_eq!(
        unsafe { spkxl_model_token_id(model, tok.as_ptr(), &mut id) },
        SpkxlStatus::Ok
    );
    assert_eq!(id as usize, vocab.id("t:"));

    for t in 0..3 {
        let window = build_window(&dialogues[0], t, 7, HistoryMode::Labels, &encoder.speakers).unwrap();
        let input = encoder.encode_window(&window).unwrap();
        let narrow = |v: &[usize]| v.iter().map(|&x| x as u32).collect::<Vec<_>>();
        let (tokens, segments, speakers) = (
            narrow(&input.token_ids),
            narrow(&input.segment_ids),
            narrow(&input.speaker_ids),
        );
        let mut out = vec![0.0; n];
        let status = unsafe {
            spkxl_model_logits(
                model,
                tokens.as_ptr(),
                segments.as_ptr(),
                speakers.as_ptr(),
                tokens.len(),
                out.as_mut_ptr(),
                n,
            )
        };
        assert_eq!(status, SpkxlStatus::Ok, "{}", last_error());
        assert_eq!(out, params.logits(&input).unwrap());
    }

    let mut small = vec![0.0; 1];
    let ids = [2u32];
    let status = unsafe {
        spkxl_model_logits(
            model,
            ids.as_ptr(),
            ids.as_ptr(),
            ids.as_ptr(),
            1,
            small.as_mut_ptr(),
            1,
        )
    };
    assert_eq!(status, SpkxlStatus::InvalidArgument);
    let bad = [9999u32, 2];
    let mut out = vec![0.0; n];
    let status = unsafe {
        spkxl_model_logits(
            model,
            bad.as_ptr(),
            [0, 2].as_ptr(),
            [0, 2].as_ptr(),
            2,
            out.as_mut_ptr(),
            n,
        )
    };
    assert_eq!(status, SpkxlStatus::OutOfRange);
    unsafe { spkxl_model_free(model) };
}

fn target_dir() -> Option<PathBuf> {
    // .../target/<profile>/deps/ffi-<hash>
    let exe = std::env::current_exe().ok()?;
    Some(exe.parent()?.parent()?.to_path_buf())
}

#[test]
fn c_program_links_against_the_header() {
    let Some(dir) = target_dir() else { return };
    let lib = dir.join("libspkxl_ffi.a");
    let have_cc = Command::new("cc").arg("--version").output().is_ok();
    if !lib.exists() || !have_cc {
        eprintln!("skipping: static library or C compiler not available");
        return;
    }
    let include = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("include");
    let work = tempfile::tempdir().unwrap();
    let src = work.path().join("probe.c");
    std::fs::write(
        &src,
        r#"#include <stdio.h>
#include <string.h>
#include "spkxl.h"
int main(void) {
    SpkxlModel *m = NULL;
    if (spkxl_relative_index(1, 1) != 1 || spkxl_relative_index(0, 1) != 0) return 1;
    if (spkxl_model_load("/nonexistent.ckpt", &m) != SPKXL_STATUS_IO || m != NULL) return 2;
    if (strstr(spkxl_last_error(), "nonexistent.ckpt") == NULL) return 3;
    printf("%s\n", spkxl_version());
    return 0;
}
"#,
    )
    .unwrap();
    let exe = work.path().join("probe");
    let status = Command::new("cc")
        .arg(&src)
        .arg("-I")
        .arg(&include)
        .arg(&lib)
        .args(["-lpthread", "-ldl", "-lm", "-o"])
        .arg(&exe)
        .status()
        .unwrap();
    assert!(status.success(), "C probe failed to compile");
    let run = Command::new(&exe).output().unwrap();
    assert!(run.status.success(), "C probe exited with {:?}", run.status);
    assert_eq!(String::from_utf8_lossy(&run.stdout).trim(), env!("CARGO_PKG_VERSION"));
}
