use std::fs;
use std::net::TcpListener;
use std::path::{Path, PathBuf};
use std::process::{Command, Output, Stdio};

use serde_json::Value;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_subenum"))
}

fn write_edges(dir: &Path, name: &str, edges: &[(u32, u32)]) -> PathBuf {
    let path = dir.join(name);
    let text: String = edges.iter().map(|(u, v)| format!("{u} {v}\n")).collect();
    fs::write(&path, text).unwrap();
    path
}

fn complete(n: u32) -> Vec<(u32, u32)> {
    (0..n).flat_map(|u| (u + 1..n).map(move |v| (u, v))).collect()
}

/// Small deterministic graph with plenty of triangles and squares.
fn grid_with_diagonals(w: u32) -> Vec<(u32, u32)> {
    let id = |x: u32, y: u32| y * w + x;
    let mut e = Vec::new();
    for y in 0..w {
        for x in 0..w {
            if x + 1 < w {
                e.push((id(x, y), id(x + 1, y)));
            }
            if y + 1 < w {
                e.push((id(x, y), id(x, y + 1)));
            }
            if x + 1 < w && y + 1 < w {
                e.push((id(x, y), id(x + 1, y + 1)));
            }
        }
    }
    e
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn metrics(o: &Output) -> Value {
    assert!(o.status.success(), "stderr: {}", String::from_utf8_lossy(&o.stderr));
    serde_json::from_slice(&o.stdout).unwrap()
}

#[test]
fn run_counts_small_graphs() {
    let dir = tempfile::tempdir().unwrap();
    let k3 = write_edges(dir.path(), "k3.txt", &complete(3));
    let k4 = write_edges(dir.path(), "k4.txt", &complete(4));
    let c4 = write_edges(dir.path(), "c4.txt", &[(0, 1), (1, 2), (2, 3), (3, 0)]);
    for (g, q) in [(&k3, "triangle"), (&k4, "4-clique"), (&c4, "square")] {
        let m = metrics(&run(&["run", "-g", g.to_str().unwrap(), "-q", q]));
        assert_eq!(m["result_count"], 1, "{q}");
    }
}

#[test]
fn metrics_json_fields() {
    let dir = tempfile::tempdir().unwrap();
    let g = write_edges(dir.path(), "g.txt", &grid_with_diagonals(6));
    let g = g.to_str().unwrap();
    let out_file = dir.path().join("m.json");
    let m = metrics(&run(&["run", "-g", g, "-q", "triangle", "--metrics-out", out_file.to_str().unwrap()]));
    for field in ["total_s", "compute_s", "comm_s", "bytes_sent", "peak_intermediate_results", "peak_rss_estimate", "result_count", "cache", "steals", "config", "per_machine"] {
        assert!(m.get(field).is_some(), "missing {field}");
    }
    let saved: Value = serde_json::from_str(&fs::read_to_string(out_file).unwrap()).unwrap();
    assert_eq!(saved["result_count"], m["result_count"]);
    let total = m["total_s"].as_f64().unwrap();
    assert!(m["comm_s"].as_f64().unwrap() <= total);
    assert!((m["comm_s"].as_f64().unwrap() + m["compute_s"].as_f64().unwrap() - total).abs() < 1e-9);
    // A single machine never pulls: traffic is only self-routed pushes.
    assert_eq!(m["rpc_bytes"], 0);
    assert_eq!(m["get_nbrs_messages"], 0);
    assert_eq!(m["config"]["batch_size"], 524_288);
    assert_eq!(m["config"]["queue_capacity"], 50_000_000);
    let k2 = metrics(&run(&["run", "-g", g, "-q", "triangle", "-k", "2", "--batch-size", "8", "--queue-capacity", "inf", "--no-steal"]));
    assert_eq!(k2["result_count"], m["result_count"]);
    assert!(k2["rpc_bytes"].as_u64().unwrap() > 0);
    assert_eq!(k2["config"]["intra_steal"], false);
}

#[test]
fn explain_labels_joins() {
    let dir = tempfile::tempdir().unwrap();
    let g = write_edges(dir.path(), "g.txt", &grid_with_diagonals(8));
    let g = g.to_str().unwrap();
    let text = stdout(&run(&["explain", "-g", g, "-q", "4-clique", "-k", "4"]));
    let joins: Vec<&str> = text.lines().filter(|l| l.starts_with("join ")).collect();
    assert!(!joins.is_empty());
    assert!(joins.iter().all(|l| l.contains("(wco, pulling)")), "{text}");
    let text = stdout(&run(&["explain", "-g", g, "-q", "5-path", "-k", "4"]));
    assert_eq!(text.matches("(hash, pushing)").count(), 1, "{text}");
    assert!(text.contains("PushJoin"));
    let text = stdout(&run(&["explain", "-g", g, "-q", "2-path", "--dot"]));
    assert!(text.contains("no joins; scan rewrite only"));
    assert!(text.contains("digraph"));
}

#[test]
fn verify_passes_and_catches_dropped_filters() {
    let dir = tempfile::tempdir().unwrap();
    let g = write_edges(dir.path(), "g.txt", &grid_with_diagonals(7));
    let g = g.to_str().unwrap();
    for q in ["triangle", "square", "house", "5-path"] {
        let o = run(&["verify", "-g", g, "-q", q, "-k", "3", "--batch-size", "16"]);
        assert_eq!(o.status.code(), Some(0), "{q}: {}", stdout(&o));
        assert!(stdout(&o).starts_with("PASS"));
    }
    let results = dir.path().join("r.txt");
    let sink = format!("file:{}", results.display());
    let o = run(&["verify", "-g", g, "-q", "square", "-k", "2", "--sink", &sink]);
    assert_eq!(o.status.code(), Some(0), "{}", stdout(&o));
    let n: usize = stdout(&o).trim().trim_start_matches("PASS ").split('=').next().unwrap().parse().unwrap();
    assert_eq!(fs::read_to_string(&results).unwrap().lines().count(), n);
    let o = run(&["verify", "-g", g, "-q", "triangle", "--drop-order-filters"]);
    assert_eq!(o.status.code(), Some(4));
    assert!(stdout(&o).starts_with("FAIL"));
    let o = run(&["verify", "-g", g, "-q", "triangle", "--drop-order-filters", "--sink", &sink]);
    assert_eq!(o.status.code(), Some(4));
    assert!(stdout(&o).contains("first divergence"));
}

#[test]
fn verify_empty_graph() {
    let dir = tempfile::tempdir().unwrap();
    let g = write_edges(dir.path(), "empty.txt", &[]);
    let o = run(&["verify", "-g", g.to_str().unwrap(), "-q", "triangle", "-k", "2"]);
    assert_eq!(o.status.code(), Some(0));
    assert_eq!(stdout(&o).trim(), "PASS 0=0");
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let g = write_edges(dir.path(), "g.txt", &complete(4));
    let g = g.to_str().unwrap();
    assert_eq!(run(&["run", "--bogus"]).status.code(), Some(1));
    assert_eq!(run(&["run", "-g", g, "-q", "no-such-query"]).status.code(), Some(1));
    assert_eq!(run(&["run", "-g", g, "-q", "triangle", "-k", "0"]).status.code(), Some(1));
    assert_eq!(run(&["run", "-g", "/nonexistent/graph", "-q", "triangle"]).status.code(), Some(2));
    let bad = dir.path().join("bad.txt");
    fs::write(&bad, "0 x\n").unwrap();
    assert_eq!(run(&["run", "-g", bad.to_str().unwrap(), "-q", "triangle"]).status.code(), Some(2));
    let disconnected = dir.path().join("q.txt");
    fs::write(&disconnected, "n 4\ne 0 1\ne 2 3\n").unwrap();
    assert_eq!(run(&["run", "-g", g, "-q", disconnected.to_str().unwrap()]).status.code(), Some(2));
    assert_eq!(run(&["--help"]).status.code(), Some(0));
}

#[test]
fn plan_round_trips_through_run() {
    let dir = tempfile::tempdir().unwrap();
    let g = write_edges(dir.path(), "g.txt", &grid_with_diagonals(6));
    let g = g.to_str().unwrap();
    let plan = dir.path().join("plan.json");
    let o = run(&["plan", "-g", g, "-q", "house", "-k", "2", "-o", plan.to_str().unwrap()]);
    assert!(o.status.success());
    let loaded = metrics(&run(&["run", "-g", g, "-q", "house", "-k", "2", "--plan", plan.to_str().unwrap()]));
    let planned = metrics(&run(&["run", "-g", g, "-q", "house", "-k", "2"]));
    assert_eq!(loaded["result_count"], planned["result_count"]);
    assert_eq!(loaded["config"]["plan_hash"], planned["config"]["plan_hash"]);
    let query = dir.path().join("tri.q");
    fs::write(&query, "n 3\ne 0 1\ne 1 2\ne 0 2\n").unwrap();
    let from_file = metrics(&run(&["run", "-g", g, "-q", query.to_str().unwrap()]));
    let named = metrics(&run(&["run", "-g", g, "-q", "triangle"]));
    assert_eq!(from_file["result_count"], named["result_count"]);
}

#[test]
fn multi_process_tcp_cluster() {
    let dir = tempfile::tempdir().unwrap();
    let g = write_edges(dir.path(), "g.txt", &grid_with_diagonals(9));
    let g = g.to_str().unwrap();
    let ports: Vec<u16> = (0..3)
        .map(|_| TcpListener::bind("127.0.0.1:0").unwrap())
        .collect::<Vec<_>>()
        .iter()
        .map(|l| l.local_addr().unwrap().port())
        .collect();
    let peers = ports.iter().map(|p| format!("127.0.0.1:{p}")).collect::<Vec<_>>().join(",");
    let children: Vec<_> = (0..3)
        .map(|id| {
            bin()
                .args(["run", "-g", g, "-q", "square", "--batch-size", "32", "--transport", "tcp"])
                .args(["--machine-id", &id.to_string(), "--peers", &peers])
                .stdout(Stdio::piped())
                .stderr(Stdio::piped())
                .spawn()
                .unwrap()
        })
        .collect();
    let outputs: Vec<Output> = children.into_iter().map(|c| c.wait_with_output().unwrap()).collect();
    for (i, o) in outputs.iter().enumerate() {
        assert!(o.status.success(), "machine {i}: {}", String::from_utf8_lossy(&o.stderr));
    }
    let m: Value = serde_json::from_slice(&outputs[0].stdout).unwrap();
    let local = metrics(&run(&["run", "-g", g, "-q", "square", "-k", "3"]));
    assert_eq!(m["result_count"], local["result_count"]);
    assert_eq!(m["per_machine"].as_array().unwrap().len(), 3);
    assert!(m["bytes_sent"].as_u64().unwrap() > 0);
}
