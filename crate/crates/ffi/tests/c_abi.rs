use std::path::{Path, PathBuf};
use std::process::Command;

const HEADER: &str = concat!(env!("CARGO_MANIFEST_DIR"), "/include/dvps.h");

const PROGRAM: &str = r#"
#include <stdio.h>
#include <stdlib.h>
#include "dvps.h"

#define CHECK(call) do { DvpsStatus s_ = (call); if (s_ != DVPS_STATUS_OK) { \
    fprintf(stderr, "%s -> %d: %s\n", #call, (int)s_, dvps_last_error_message()); return 1; } } while (0)

int main(void) {
    const char *cfg = "{\"num_videos\": 2, \"scene\": {\"num_frames\": 4, \"height\": 32, \"width\": 32, \"noise\": 0.0}}";
    DvpsDataset *ds = NULL;
    DvpsModels *models = NULL;
    CHECK(dvps_dataset_generate(cfg, &ds));
    CHECK(dvps_models_load(DVPS_STAGE_PREMATCH, NULL, NULL, &models));
    size_t n = dvps_dataset_len(ds);
    const DvpsVideo *pred[2];
    const DvpsVideo *gt[2];
    for (size_t i = 0; i < n; i++) {
        DvpsVideo *p = NULL, *g = NULL;
        CHECK(dvps_infer(ds, i, models, NULL, 0, &p));
        CHECK(dvps_dataset_ground_truth(ds, i, &g));
        pred[i] = p;
        gt[i] = g;
    }
    size_t hw = dvps_video_height(pred[0]) * dvps_video_width(pred[0]);
    uint32_t *ids = malloc(hw * sizeof(uint32_t));
    CHECK(dvps_video_frame_ids(pred[0], 0, ids, hw));
    if (dvps_video_frame_ids(pred[0], 0, ids, hw - 1) != DVPS_STATUS_BUFFER_TOO_SMALL) return 2;
    if (dvps_infer(ds, n, models, NULL, 0, NULL) != DVPS_STATUS_OUT_OF_RANGE) return 3;
    DvpsMetrics m;
    CHECK(dvps_evaluate(pred, gt, n, &m));
    printf("vpq %.3f aa %.3f\n", m.vpq, m.association_accuracy);
    double cost[4] = {1.0, 0.0, 0.0, 1.0};
    size_t perm[2];
    CHECK(dvps_hungarian(cost, 2, 2, perm, NULL));
    if (perm[0] != 1 || perm[1] != 0) return 4;
    for (size_t i = 0; i < n; i++) {
        dvps_video_free((DvpsVideo *)pred[i]);
        dvps_video_free((DvpsVideo *)gt[i]);
    }
    free(ids);
    dvps_models_free(models);
    dvps_dataset_free(ds);
    return (m.vpq == 100.0 && m.association_accuracy == 1.0) ? 0 : 5;
}
"#;

fn compiler() -> Option<String> {
    let cc = std::env::var("CC").unwrap_or_else(|_| "cc".into());
    Command::new(&cc).arg("--version").output().ok()?;
    Some(cc)
}

// target/<profile>, two levels above the test executable in deps/
fn artifact_dir() -> PathBuf {
    let exe = std::env::current_exe().unwrap();
    exe.parent().unwrap().parent().unwrap().to_path_buf()
}

#[test]
fn header_is_valid_c() {
    let Some(cc) = compiler() else {
        eprintln!("no C compiler; skipped");
        return;
    };
    let out = Command::new(cc)
        .args([
            "-std=c99",
            "-Wall",
            "-Wextra",
            "-Werror",
            "-fsyntax-only",
            "-x",
            "c",
            HEADER,
        ])
        .output()
        .unwrap();
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
}

#[test]
fn header_declares_every_export() {
    let header = std::fs::read_to_string(HEADER).unwrap();
    let src = std::fs::read_to_string(concat!(env!("CARGO_MANIFEST_DIR"), "/src/lib.rs")).unwrap();
    let exports: Vec<&str> = src
        .split("extern \"C\" fn ")
        .skip(1)
        .map(|s| s.split('(').next().unwrap())
        .collect();
    assert!(exports.len() >= 15);
    for f in exports {
        assert!(
            header.contains(&format!(" {f}(")) || header.contains(&format!("*{f}(")),
            "{f}"
        );
    }
}

#[test]
fn c_program_runs_the_pipeline() {
    let Some(cc) = compiler() else {
        eprintln!("no C compiler; skipped");
        return;
    };
    let lib = artifact_dir().join("libdvps_ffi.a");
    assert!(lib.exists(), "{} not built", lib.display());
    let dir = tempfile::tempdir().unwrap();
    let src = dir.path().join("main.c");
    let exe = dir.path().join("main");
    std::fs::write(&src, PROGRAM).unwrap();
    let include = Path::new(HEADER).parent().unwrap();
    let out = Command::new(cc)
        .arg("-std=c99")
        .arg("-I")
        .arg(include)
        .arg(&src)
        .arg(&lib)
        .args(["-lpthread", "-ldl", "-lm", "-o"])
        .arg(&exe)
        .output()
        .unwrap();
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let run = Command::new(&exe).output().unwrap();
    let stdout = String::from_utf8_lossy(&run.stdout);
    assert!(
        run.status.success(),
        "exit {:?}\n{stdout}\n{}",
        run.status.code(),
        String::from_utf8_lossy(&run.stderr)
    );
    assert!(stdout.contains("vpq 100.000 aa 1.000"), "{stdout}");
}
