#![allow(dead_code)]

use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::{json, Value};

pub fn write_jsonl(path: &Path, lines: &[Value]) {
    let mut f = std::fs::File::create(path).unwrap();
    for l in lines {
        writeln!(f, "{l}").unwrap();
    }
}

pub fn read_jsonl(path: &Path) -> Vec<Value> {
    std::fs::read_to_string(path)
        .unwrap()
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).unwrap())
        .collect()
}

pub fn cbdt(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cbdt"))
        .args(args)
        .env_remove("CBDT_CONFIG")
        .output()
        .expect("running cbdt")
}

pub fn cbdt_ok(args: &[&str]) -> String {
    let out = cbdt(args);
    assert!(
        out.status.success(),
        "cbdt {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

/// A small translation-memory style data set on disk.
pub struct Fixture {
    pub dir: tempfile::TempDir,
}

impl Fixture {
    pub fn path(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }

    pub fn arg(&self, name: &str) -> String {
        self.path(name).to_string_lossy().into_owned()
    }

    pub fn new() -> Self {
        let dir = tempfile::tempdir().unwrap();
        let fx = Fixture { dir };
        let parallel = [
            ("m0", "das Gerät starten", "start the device"),
            ("m1", "das Gerät stoppen", "stop the device"),
            ("m2", "die Datei öffnen", "open the file"),
            ("m3", "die Datei speichern", "save the file"),
            ("m4", "den Drucker starten", "start the printer"),
        ];
        write_jsonl(
            &fx.path("parallel.jsonl"),
            &parallel
                .iter()
                .map(|(id, s, r)| json!({"id": id, "source": s, "ref": r}))
                .collect::<Vec<_>>(),
        );
        let mem_hyps: Vec<Value> = parallel
            .iter()
            .map(|(id, _, r)| {
                let words: Vec<&str> = r.split(' ').collect();
                let hyps = vec![
                    r.to_string(),
                    format!("{} a {}", words[0], words[2]),
                    r.to_string(),
                    format!("{} {}", words[0], words[2]),
                    format!("please {r}"),
                ];
                json!({"id": id, "hyps": hyps})
            })
            .collect();
        write_jsonl(&fx.path("mem_hyps.jsonl"), &mem_hyps);

        let inputs = [
            ("t0", "das Gerät neu starten"),
            ("t1", "die Datei schließen"),
            ("t2", "den Drucker stoppen"),
        ];
        write_jsonl(
            &fx.path("inputs.jsonl"),
            &inputs.iter().map(|(id, s)| json!({"id": id, "source": s})).collect::<Vec<_>>(),
        );
        let cands = [
            ("t0", ["restart the device", "start the device again", "restart the machine", "reboot device"], [-1.0, -2.0, -0.5, -3.0]),
            ("t1", ["close the file", "shut the file", "close file", "the file close"], [-1.2, -1.1, -0.9, -0.9]),
            ("t2", ["stop the printer", "halt the printer", "stop printer", "printer stop"], [-0.7, -0.9, -1.5, -2.5]),
        ];
        write_jsonl(
            &fx.path("candidates.jsonl"),
            &cands
                .iter()
                .map(|(id, hs, lps)| {
                    let hyps: Vec<Value> = hs
                        .iter()
                        .zip(lps)
                        .map(|(h, lp)| json!({"text": h, "logprob": lp}))
                        .collect();
                    json!({"id": id, "hyps": hyps})
                })
                .collect::<Vec<_>>(),
        );
        write_jsonl(
            &fx.path("references.jsonl"),
            &[
                json!({"id": "t0", "ref": "restart the device"}),
                json!({"id": "t1", "ref": "close the file"}),
                json!({"id": "t2", "ref": "stop the printer"}),
            ],
        );
        fx
    }

    pub fn build_memory(&self, h_cap: usize) -> String {
        let out = self.arg(&format!("memory_{h_cap}.jsonl"));
        cbdt_ok(&[
            "build-memory",
            "--parallel",
            &self.arg("parallel.jsonl"),
            "--hyps",
            &self.arg("mem_hyps.jsonl"),
            "--h-cap",
            &h_cap.to_string(),
            "--out",
            &out,
        ]);
        out
    }

    pub fn decode(&self, out_name: &str, extra: &[&str]) -> Vec<Value> {
        let out = self.arg(out_name);
        let mut args = vec![
            "decode".to_string(),
            "--inputs".into(),
            self.arg("inputs.jsonl"),
            "--candidates".into(),
            self.arg("candidates.jsonl"),
            "--output".into(),
            out.clone(),
        ];
        args.extend(extra.iter().map(|s| s.to_string()));
        let refs: Vec<&str> = args.iter().map(String::as_str).collect();
        cbdt_ok(&refs);
        read_jsonl(Path::new(&out))
    }
}
