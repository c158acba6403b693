import csv
import io
import json
import random

import pytest

from rodentstore import bench as bh
from rodentstore.cli import main


@pytest.fixture
def run(capsys):
    def _run(*argv):
        code = main([str(a) for a in argv])
        out, err = capsys.readouterr()
        return code, out, err
    return _run


def _error(err: str) -> dict:
    lines = [line for line in err.splitlines() if line.strip()]
    assert lines, "expected an error line"
    return json.loads(lines[-1])


@pytest.fixture
def points(tmp_path):
    rng = random.Random(3)
    rows = [(i, round(rng.random(), 6), round(rng.random(), 6), f"v{i % 7}") for i in range(800)]
    path = tmp_path / "pts.csv"
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["t", "lat", "lon", "id"])
        for r in rows:
            w.writerow([r[0], repr(r[1]), repr(r[2]), r[3]])
    return rows, path


@pytest.fixture
def loaded(tmp_path, run, points):
    db = tmp_path / "c.db"
    assert run("create", db, "P", "t:int,lat:float,lon:float,id:string")[0] == 0
    assert run("load", db, "P", points[1])[0] == 0
    return db


def _rows(out: str) -> list[list[str]]:
    return list(csv.reader(io.StringIO(out)))


def test_create_and_duplicate(tmp_path, run):
    db = tmp_path / "x.db"
    code, out, _ = run("create", db, "T", "a:int,b:string")
    assert code == 0 and "T" in out
    code, _, err = run("create", db, "T", "a:int")
    assert code != 0 and "T" in _error(err)["message"]


def test_bad_type_name_is_named(tmp_path, run):
    code, _, err = run("create", tmp_path / "x.db", "T", "a:int,b:decimal")
    assert code != 0 and "decimal" in _error(err)["message"]


def test_small_page_size_rejected(tmp_path, run):
    code, _, err = run("--page-size", 1024, "create", tmp_path / "x.db", "T", "a:int")
    assert code != 0 and "4096" in _error(err)["message"]


def test_env_page_size(tmp_path, run, monkeypatch):
    monkeypatch.setenv("RODENTSTORE_PAGE_SIZE", "16384")
    db = tmp_path / "x.db"
    run("create", db, "T", "a:int")
    assert json.loads(run("stats", db)[1])["page_size"] == 16384


def test_load_and_query(loaded, run, points):
    rows, _ = points
    code, out, _ = run("query", loaded, "P")
    assert code == 0
    got = _rows(out)
    assert got[0] == ["t", "lat", "lon", "id"]
    assert [(int(a), float(b), float(c), d) for a, b, c, d in got[1:]] == rows


def test_query_where_box_on_grid(tmp_path, loaded, run, points):
    rows, _ = points
    f = tmp_path / "g.rsa"
    f.write_text("zorder(grid[lat:0.1, lon:0.1](P))\n")
    assert run("layout", loaded, "P", f, "--apply")[0] == 0
    code, out, _ = run("query", loaded, "P", "--project", "lat,lon", "--where", "lat>=.3&lat<.4&lon>=.5&lon<.6")
    assert code == 0
    got = sorted((float(a), float(b)) for a, b in _rows(out)[1:])
    want = sorted((r[1], r[2]) for r in rows if 0.3 <= r[1] < 0.4 and 0.5 <= r[2] < 0.6)
    assert got == want and want


def test_query_order(loaded, run, points):
    rows, _ = points
    out = run("query", loaded, "P", "--project", "t", "--order", "lat DESC")[1]
    assert [int(r[0]) for r in _rows(out)[1:]] == [r[0] for r in sorted(rows, key=lambda r: -r[1])]


def test_layout_dry_run_leaves_counters(tmp_path, loaded, run):
    f = tmp_path / "g.rsa"
    f.write_text("-- cells for spatial queries\nzorder(grid[lat:0.1, lon:0.1](P))\n")
    before = json.loads(run("stats", loaded)[1])["counters"]
    code, out, _ = run("layout", loaded, "P", f)
    assert code == 0
    assert "zorder(grid[lat:0.1, lon:0.1](P))" in out and "full-scan cost" in out
    after = json.loads(run("stats", loaded)[1])
    assert after["counters"] == before
    assert after["tables"]["P"]["layout"] == "P"


def test_apply_shows_cells_and_morton(tmp_path, loaded, run):
    f = tmp_path / "n3z.rsa"
    f.write_text("zorder(grid[lat:0.1:0, lon:0.1:0]([[r.lat, r.lon] | \\r <- P, orderby r.t, groupby r.id]))\n")
    code, _, err = run("layout", loaded, "P", f, "--apply")
    assert code != 0 and "drop" in _error(err)["message"]
    assert run("layout", loaded, "P", f, "--apply", "--allow-drop")[0] == 0
    text = run("stats", loaded)[1]
    assert '"cells"' in text and "morton" in text


def test_layout_errors_have_positions(tmp_path, loaded, run):
    f = tmp_path / "bad.rsa"
    f.write_text("grid[lat:0.1](\n  P\n")
    code, _, err = run("layout", loaded, "P", f)
    e = _error(err)
    assert code != 0 and e["error"] == "ParseError" and e["line"] == 3
    f.write_text("\n  project[nope](P)")
    code, _, err = run("layout", loaded, "P", f)
    e = _error(err)
    assert code != 0 and e["error"] == "BindError" and (e["line"], e["column"]) == (2, 3)


def test_query_output_survives_layout_apply(tmp_path, loaded, run):
    before = run("query", loaded, "P", "--order", "t")[1]
    for i, expr in enumerate(("[[r.t | \\r <- P], [r.lat, r.lon, r.id | \\r <- P]]",
                              "delta[lat, lon](zorder(grid[lat:0.2, lon:0.25](P)))", "P")):
        f = tmp_path / f"l{i}.rsa"
        f.write_text(expr)
        assert run("layout", loaded, "P", f, "--apply")[0] == 0
        assert run("query", loaded, "P", "--order", "t")[1] == before


def test_stats_reset(loaded, run):
    run("query", loaded, "P")
    first = json.loads(run("stats", loaded)[1])
    assert first["counters"]["pages_read"] > 0
    info = json.loads(run("stats", loaded, "--reset")[1])
    assert info["counters_reset"]
    after = json.loads(run("stats", loaded)[1])["counters"]
    assert after == {"pages_read": 0, "pages_written": 0, "seeks": 0}


def test_missing_database(tmp_path, run):
    code, _, err = run("query", tmp_path / "none.db", "T")
    assert code != 0 and _error(err)["error"] == "CliError"


def test_usage_error_is_machine_readable(run):
    with pytest.raises(SystemExit) as ex:
        run("query")
    assert ex.value.code != 0


def test_advise_prints_grid(tmp_path, run):
    cfg = bh.BenchConfig(n_points=100_000, n_queries=40, seed=5)
    traces, work = tmp_path / "tr.csv", tmp_path / "wk.csv"
    assert run("bench", "gen-traces", traces, "--seed", 5, "--points", 100_000)[0] == 0
    assert run("bench", "gen-workload", work, "--seed", 5, "--queries", 40)[0] == 0
    db = tmp_path / "a.db"
    run("--page-size", 65536, "create", db, "Traces", bh.TRACE_SCHEMA)
    run("load", db, "Traces", traces)
    code, out, err = run("advise", db, "Traces", work)
    assert code == 0, err
    lines = out.splitlines()
    assert "grid[" in lines[0]
    assert "row baseline" in lines[1]
    assert run("advise", db, "Traces", work)[1] == out
    code, _, err = run("advise", db, "Traces", work, "--strategy", "anneal")
    assert code != 0 and "seed" in _error(err)["message"]
    a1 = run("advise", db, "Traces", work, "--strategy", "anneal", "--seed", 3)
    a2 = run("advise", db, "Traces", work, "--strategy", "anneal", "--seed", 3)
    assert a1 == a2 and a1[0] == 0
    assert len(bh.read_workload(str(work))) == cfg.n_queries


def test_bench_commands(tmp_path, run):
    traces, work, rep = tmp_path / "tr.csv", tmp_path / "wk.csv", tmp_path / "r.csv"
    assert run("bench", "gen-traces", traces, "--seed", 1, "--points", 2000, "--vehicles", 5)[0] == 0
    assert run("bench", "gen-workload", work, "--seed", 1, "--queries", 10)[0] == 0
    assert traces.read_text() == bh.gen_traces(bh.BenchConfig(n_points=2000, n_vehicles=5, seed=1))
    code, out, err = run("--page-size", 4096, "bench", "run", tmp_path / "b.db", traces, work,
                         "--layouts", "row,grid,zdelta", "--grid-cells", 10, "--report", rep)
    assert code == 0, err
    assert out == rep.read_text()
    assert [r.layout for r in bh.read_report(str(rep)).rows] == ["row", "grid", "zdelta"]
    code, _, err = run("bench", "run", tmp_path / "b.db", traces, work, "--layouts", "rtree")
    assert code != 0 and "rtree" in _error(err)["message"]
    with pytest.raises(SystemExit):
        run("bench", "gen-traces", traces)
    code, _, err = run("bench", "gen-workload", work, "--seed", 1, "--coverage", 2)
    assert code != 0 and "coverage" in _error(err)["message"]
