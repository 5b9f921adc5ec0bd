//! Synthetic corpus with planted ground truth, shared by the integration
//! tests.
#![allow(dead_code)]

use std::fs;
use std::path::{Path, PathBuf};

use jchat_core::audio::write_tone;
use jchat_core::worker::mock::sidecar;
use jchat_core::{DiarizationTurn, Source};
use serde::{Deserialize, Serialize};

pub const DOC_SECONDS: f64 = 40.0;
pub const SAMPLE_RATE: u32 = 8_000;

pub struct Planted {
    pub name: &'static str,
    pub source: Source,
    pub lid: Vec<(&'static str, f64)>,
    /// `None` leaves out the turns sidecar, so diarization fails.
    pub turns: Option<Vec<DiarizationTurn>>,
    /// `false` writes bytes that are not a WAV file.
    pub wav: bool,
    pub enhance_fail: Vec<f64>,
    /// Dialogues that survive segmentation, as (start, end).
    pub retained: Vec<(f64, f64)>,
}

/// Alternating turns of `len` seconds over `[start, end)`.
pub fn conv(start: f64, end: f64, speakers: &[&str], len: f64) -> Vec<DiarizationTurn> {
    let mut out = Vec::new();
    let mut t = start;
    let mut i = 0;
    while t < end - 1e-9 {
        let e = (t + len).min(end);
        out.push(DiarizationTurn::new(speakers[i % speakers.len()], t, e));
        t = e;
        i += 1;
    }
    out
}

fn turn(s: &str, a: f64, b: f64) -> DiarizationTurn {
    DiarizationTurn::new(s, a, b)
}

fn cat(parts: Vec<Vec<DiarizationTurn>>) -> Vec<DiarizationTurn> {
    parts.into_iter().flatten().collect()
}

fn ja(p: f64) -> Vec<(&'static str, f64)> {
    vec![("ja", p), ("en", (1.0 - p) / 2.0)]
}

fn doc(name: &'static str, source: Source, lid: Vec<(&'static str, f64)>, turns: Vec<DiarizationTurn>, retained: Vec<(f64, f64)>) -> Planted {
    Planted {
        name,
        source,
        lid,
        turns: Some(turns),
        wav: true,
        enhance_fail: vec![],
        retained,
    }
}

pub fn planted() -> Vec<Planted> {
    use Source::{Podcast as P, Youtube as Y};
    let ab = &["A", "B"][..];
    vec![
        doc("y0", Y, ja(0.95), conv(0.0, 20.0, ab, 2.0), vec![(0.0, 20.0)]),
        doc(
            "y1",
            Y,
            ja(0.9),
            cat(vec![conv(0.0, 10.0, ab, 2.5), conv(16.0, 30.0, ab, 2.0)]),
            vec![(0.0, 10.0), (16.0, 30.0)],
        ),
        doc("y2", Y, ja(0.85), conv(0.0, 20.0, &["A"], 5.0), vec![]),
        // exactly at the threshold: rejected
        doc("y3", Y, vec![("ja", 0.8), ("en", 0.2)], conv(0.0, 20.0, ab, 2.0), vec![]),
        doc("y4", Y, vec![("en", 0.9), ("ja", 0.05)], conv(0.0, 20.0, ab, 2.0), vec![]),
        // 0.85 dominance, then a gap of exactly 5 s
        doc(
            "y5",
            Y,
            ja(0.99),
            cat(vec![vec![turn("A", 0.0, 17.0), turn("B", 17.0, 20.0)], conv(25.0, 35.0, ab, 2.5)]),
            vec![(25.0, 35.0)],
        ),
        // dominance exactly 0.80: retained
        doc("y6", Y, ja(0.9), vec![turn("A", 0.0, 8.0), turn("B", 8.0, 10.0)], vec![(0.0, 10.0)]),
        Planted {
            turns: None,
            ..doc("y7", Y, ja(0.9), vec![], vec![])
        },
        Planted {
            wav: false,
            ..doc("y8", Y, ja(0.9), conv(0.0, 20.0, ab, 2.0), vec![])
        },
        // a gap just under 5 s does not split
        doc(
            "y9",
            Y,
            ja(0.9),
            cat(vec![conv(0.0, 12.0, &["A", "B", "C"], 2.0), conv(16.999, 30.0, ab, 2.0)]),
            vec![(0.0, 30.0)],
        ),
        doc(
            "p0",
            P,
            ja(0.9),
            cat(vec![conv(0.0, 12.0, ab, 2.0), conv(20.0, 36.0, ab, 4.0)]),
            vec![(0.0, 12.0), (20.0, 36.0)],
        ),
        doc(
            "p1",
            P,
            ja(0.92),
            cat(vec![conv(0.0, 8.0, ab, 2.0), conv(14.0, 24.0, ab, 2.0)]),
            vec![(0.0, 8.0), (14.0, 24.0)],
        ),
        doc("p2", P, ja(0.97), conv(5.0, 30.0, ab, 2.5), vec![(5.0, 30.0)]),
        doc("p3", P, ja(0.81), conv(0.0, 39.0, ab, 3.0), vec![(0.0, 39.0)]),
        // overlapping turns
        doc(
            "p4",
            P,
            ja(0.9),
            vec![turn("A", 0.0, 10.0), turn("B", 5.0, 15.0), turn("A", 14.0, 20.0)],
            vec![(0.0, 20.0)],
        ),
        doc("p5", P, ja(0.9), conv(2.0, 22.0, &["A", "B", "C"], 2.0), vec![(2.0, 22.0)]),
        doc("p6", P, ja(0.7), conv(0.0, 20.0, ab, 2.0), vec![]),
        Planted {
            enhance_fail: vec![3.0],
            ..doc("p7", P, ja(0.9), conv(3.0, 23.0, ab, 2.0), vec![(3.0, 23.0)])
        },
        doc(
            "p8",
            P,
            ja(0.9),
            cat(vec![conv(0.0, 15.0, ab, 3.0), conv(25.0, 35.0, &["B"], 5.0)]),
            vec![(0.0, 15.0)],
        ),
        doc("p9", P, vec![("ko", 0.95), ("ja", 0.03)], conv(0.0, 20.0, ab, 2.0), vec![]),
    ]
}

pub fn uri_of(p: &Planted) -> String {
    match p.source {
        Source::Youtube => format!("https://video.example/watch/{}.wav", p.name),
        _ => format!("https://pod.example/ep/{}.wav", p.name),
    }
}

/// One expected dialogue of the release.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Expected {
    pub uri: String,
    pub source: Source,
    pub start_s: f64,
    pub end_s: f64,
    /// False when the planted enhancement failure drops it from the release.
    pub released: bool,
}

pub struct Fixture {
    pub dir: PathBuf,
    pub root: PathBuf,
}

const FEED_TEMPLATE_HEAD: &str = r#"<?xml version="1.0" encoding="UTF-8"?>
<rss version="2.0"><channel><title>Fixture podcast</title>
"#;

impl Fixture {
    /// Writes the audio, sidecars, search inputs, feed and ground truth
    /// under `dir`.
    pub fn build(dir: &Path) -> Fixture {
        let root = dir.join("root");
        let docs = planted();
        let mut items = String::new();
        let mut truth = Vec::new();
        for (i, p) in docs.iter().enumerate() {
            let uri = uri_of(p);
            let url = url::Url::parse(&uri).unwrap();
            let path = root.join(url.host_str().unwrap()).join(&url.path()[1..]);
            fs::create_dir_all(path.parent().unwrap()).unwrap();
            if p.wav {
                write_tone(&path, SAMPLE_RATE, DOC_SECONDS, 200.0 + 20.0 * i as f32).unwrap();
            } else {
                fs::write(&path, b"<html>not audio</html>").unwrap();
            }
            let lid: serde_json::Map<String, serde_json::Value> =
                p.lid.iter().map(|(k, v)| (k.to_string(), (*v).into())).collect();
            fs::write(sidecar(&path, ".lid.json"), serde_json::to_vec(&lid).unwrap()).unwrap();
            if let Some(t) = &p.turns {
                fs::write(sidecar(&path, ".turns.json"), serde_json::to_vec(t).unwrap()).unwrap();
            }
            if !p.enhance_fail.is_empty() {
                fs::write(
                    sidecar(&path, ".enhance_fail.json"),
                    serde_json::to_vec(&p.enhance_fail).unwrap(),
                )
                .unwrap();
            }
            for &(s, e) in &p.retained {
                truth.push(Expected {
                    uri: uri.clone(),
                    source: p.source,
                    start_s: s,
                    end_s: e,
                    released: !p.enhance_fail.iter().any(|f| *f == s),
                });
            }
            if p.source == Source::Podcast {
                items.push_str(&format!(
                    "<item><title>{n}</title><guid>{n}</guid><enclosure url=\"{uri}\" type=\"audio/wav\" length=\"1\"/></item>\n",
                    n = p.name
                ));
            }
        }
        // a non-audio enclosure and a repeated episode
        items.push_str(
            "<item><title>notes</title><guid>notes</guid><enclosure url=\"https://pod.example/notes.pdf\" type=\"application/pdf\"/></item>\n",
        );
        items.push_str(
            "<item><title>p0 again</title><guid>p0</guid><enclosure url=\"https://pod.example/ep/p0.wav\" type=\"audio/wav\"/></item>\n",
        );
        let feed = format!("{FEED_TEMPLATE_HEAD}{items}</channel></rss>\n");
        fs::create_dir_all(root.join("pod.example")).unwrap();
        fs::write(root.join("pod.example/feed.xml"), feed).unwrap();
        fs::write(
            dir.join("feeds.tsv"),
            "# fixture feeds\nhttps://pod.example/feed.xml\tja\nhttps://other.example/feed.xml\ten\n",
        )
        .unwrap();

        let mut titles = String::new();
        let mut results = serde_json::Map::new();
        for p in docs.iter().filter(|p| p.source == Source::Youtube) {
            let title = format!("title {}", p.name);
            titles.push_str(&title);
            titles.push('\n');
            results.insert(title, serde_json::json!([uri_of(p)]));
        }
        titles.push_str("title y0\n");
        // a second keyword returning an already-seen video
        titles.push_str("title extra\n");
        results.insert("title extra".into(), serde_json::json!([uri_of(&docs[0])]));
        fs::write(dir.join("titles.txt"), titles).unwrap();
        fs::write(dir.join("search.json"), serde_json::to_vec_pretty(&results).unwrap()).unwrap();
        fs::write(dir.join("ground_truth.json"), serde_json::to_vec_pretty(&truth).unwrap()).unwrap();
        Fixture {
            dir: dir.to_path_buf(),
            root,
        }
    }

    pub fn ground_truth(&self) -> Vec<Expected> {
        serde_json::from_slice(&fs::read(self.dir.join("ground_truth.json")).unwrap()).unwrap()
    }

    /// Config text; `workers` is either `mock = true` or per-task tables.
    pub fn config(&self, workdir: &Path, output: &Path, workers: &str) -> String {
        format!(
            r#"[paths]
workdir = "{workdir}"
output_dir = "{output}"
feed_list = "{dir}/feeds.tsv"
search_results = "{dir}/search.json"
titles_file = "{dir}/titles.txt"
fetch_root = "{root}"

[collect]
num_keywords = 11
feed_language = "ja"
retry_attempts = 1
retry_base_delay_ms = 1

[lid]
target_language = "ja"

[split]
kind = "counts"
train = 0
valid = 2
test = 2

[seeds]
keywords = 7
split = 11
features = 13

[shards]
max_records = 8

[package]
sample_rate_hz = {SAMPLE_RATE}

[features]
n_samples = 50

[workers]
{workers}
"#,
            workdir = workdir.display(),
            output = output.display(),
            dir = self.dir.display(),
            root = self.root.display(),
        )
    }

    pub fn write_config(&self, name: &str, workdir: &Path, output: &Path, workers: &str) -> PathBuf {
        let p = self.dir.join(name);
        fs::write(&p, self.config(workdir, output, workers)).unwrap();
        p
    }
}

/// Worker tables pointing every task at the mock worker binary.
pub fn subprocess_workers(bin: &str, pool_size: usize) -> String {
    ["lid", "diarize", "enhance", "features"]
        .iter()
        .map(|t| format!("[workers.{t}]\ncommand = [\"{bin}\", \"--tasks\", \"{t}\"]\npool_size = {pool_size}\ntimeout_s = 60\n"))
        .collect::<Vec<_>>()
        .join("\n")
}
