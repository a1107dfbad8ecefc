import csv
import json

import numpy as np
import pytest

from mvsample import bundle as bnd, cli, field, pca


@pytest.fixture
def gen_field(tmp_path):
    path = tmp_path / "f.json"
    assert cli.main(["gen", "--grid", "48,48", "--d", "6", "--regions", "4", "--gen-seed", "2", "-o", str(path)]) == 0
    return path


def _rows(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def test_gen_writes_field_truth_and_manifest(gen_field):
    fld = field.load_field(gen_field)
    assert fld.grid.dims == (48, 48) and fld.n_vars == 6
    manifest = json.loads(gen_field.with_name("f.json.manifest.json").read_text())
    assert manifest["command"] == "gen"
    assert manifest["seeds"]["synthetic"] == 2
    assert set(manifest["versions"]) >= {"mvsample", "numpy", "scipy", "python"}
    assert len(manifest["config_sha256"]) == 64
    labels = np.fromfile(gen_field.with_name("f.regions.bin"), dtype="<u4")
    assert labels.size == 48 * 48 and len(manifest["ranks"]) == 4


def test_reduce_report_row(tmp_path, gen_field):
    out, report = tmp_path / "b.mvrb", tmp_path / "t.csv"
    rc = cli.main(["reduce", "--input", str(gen_field), "--scheme", "regular", "--block", "12",
                   "--p", "0.999", "-o", str(out), "--report", str(report), "--pc-map", str(tmp_path / "pc.ppm")])
    assert rc == 0
    (row,) = _rows(report)
    assert list(row) == cli.TABLE_COLUMNS
    assert row["scheme"] == "regular" and int(row["n_partitions"]) == 16
    assert float(row["norm_mv_recon_error"]) <= 0.001
    assert float(row["reduced_mb"]) * 2**20 == pytest.approx(out.stat().st_size)
    assert (tmp_path / "pc.ppm").exists() and (tmp_path / "pc.range.txt").exists()
    manifest = json.loads((tmp_path / "b.mvrb.manifest.json").read_text())
    assert manifest["size_report"]["reduced_bytes"] == out.stat().st_size


@pytest.mark.parametrize("scheme,extra", [
    ("regular", ["--block", "12,16"]),
    ("kdtree", ["--kd-qmax", "2", "--kd-p", "0.99", "--kd-min-dim", "3"]),
    ("slic", ["--slic-n", "12", "--slic-iters", "5"]),
])
def test_reduce_each_scheme(tmp_path, gen_field, scheme, extra):
    out = tmp_path / f"{scheme}.mvrb"
    assert cli.main(["reduce", "--input", str(gen_field), "--scheme", scheme, *extra, "-o", str(out), "--workers", "2"]) == 0
    assert bnd.load_bundle(out).scheme == scheme


def test_flags_override_config(tmp_path, gen_field):
    cfg = tmp_path / "run.toml"
    cfg.write_text(f'[input]\nheader = "{gen_field}"\n[partition]\nscheme = "regular"\nblock = [8]\n'
                   '[sampling]\nrate_random = 0.05\nrate_feature = 0.0\nseed = 9\n')
    out = tmp_path / "b.mvrb"
    assert cli.main(["reduce", "--config", str(cfg), "--block", "16", "-o", str(out)]) == 0
    b = bnd.load_bundle(out)
    assert b.pset.block_dims == (16, 16)
    assert b.plan.rate_feature == 0.0 and b.plan.seed == 9
    manifest = json.loads((tmp_path / "b.mvrb.manifest.json").read_text())
    assert manifest["config"]["partition"]["block"] == [16]
    assert manifest["seeds"]["sampling"] == 9


def test_reduce_is_reproducible(tmp_path, gen_field):
    args = ["reduce", "--input", str(gen_field), "--scheme", "slic", "--slic-n", "10"]
    assert cli.main([*args, "-o", str(tmp_path / "a.mvrb"), "--workers", "1"]) == 0
    assert cli.main([*args, "-o", str(tmp_path / "b.mvrb"), "--workers", "3"]) == 0
    assert (tmp_path / "a.mvrb").read_bytes() == (tmp_path / "b.mvrb").read_bytes()


def test_reduce_from_synthetic_config(tmp_path):
    cfg = tmp_path / "syn.toml"
    cfg.write_text('[input.synthetic]\ngrid = [32, 32]\nd = 5\nn_regions = 2\nseed = 1\n[output]\npath = "x.mvrb"\n')
    out = tmp_path / "x.mvrb"
    assert cli.main(["reduce", "--config", str(cfg), "-o", str(out), "--report", str(tmp_path / "r.csv")]) == 0
    assert out.exists() and _rows(tmp_path / "r.csv")


@pytest.fixture
def vortex_bundle(tmp_path):
    src = tmp_path / "v.json"
    assert cli.main(["gen", "--kind", "vortex", "--grid", "48,48", "-o", str(src)]) == 0
    out = tmp_path / "v.mvrb"
    assert cli.main(["reduce", "--input", str(src), "--block", "8", "--p", "1.0", "--precision", "f64",
                     "--rate-random", "0.1", "--rate-feature", "0.1", "-o", str(out)]) == 0
    return src, out


def test_query_command(tmp_path, vortex_bundle):
    src, bpath = vortex_bundle
    out = tmp_path / "q.csv"
    rc = cli.main(["query", str(bpath), "--query", "pressure=-1000,temperature=0,wind=20",
                   "-o", str(out), "--raster", str(tmp_path / "q.ppm")])
    assert rc == 0
    rows = _rows(out)
    b = bnd.load_bundle(bpath)
    assert len(rows) == b.n_samples
    norm = [float(r["normalized"]) for r in rows]
    assert min(norm) == 0.0 and max(norm) == 1.0
    img = field.read_ppm(tmp_path / "q.ppm")
    assert img.shape == (48, 48, 3)


def test_query_full_rank_matches_direct_distance(tmp_path, vortex_bundle):
    src, bpath = vortex_bundle
    fld = field.load_field(src)
    q = dict(zip(fld.var_names, [-1000.0, 0.0, 20.0, 0.01, 5e-4, 2e-3]))
    spec = ",".join(f"{k}={v}" for k, v in q.items())
    assert cli.main(["query", str(bpath), "--query", spec, "-o", str(tmp_path / "q.csv")]) == 0
    rows = _rows(tmp_path / "q.csv")
    idx = np.array([int(r["index"]) for r in rows])
    dist = np.array([float(r["distance"]) for r in rows])
    direct = np.linalg.norm(fld.data[idx] - np.array(list(q.values())), axis=1)
    np.testing.assert_allclose(dist, direct, atol=1e-6)


def test_correlate_and_reconstruct(tmp_path, vortex_bundle):
    src, bpath = vortex_bundle
    assert cli.main(["correlate", str(bpath), "--vars", "pressure,temperature", "-o", str(tmp_path / "c.csv"),
                     "--raster", str(tmp_path / "c.ppm")]) == 0
    rows = _rows(tmp_path / "c.csv")
    assert {r["var_i"] for r in rows} == {"pressure"} and len(rows) == 36
    assert cli.main(["reconstruct", str(bpath), "--original", str(src), "-o", str(tmp_path / "r.csv"),
                     "--report", str(tmp_path / "rt.csv")]) == 0
    rec = _rows(tmp_path / "r.csv")
    fld = field.load_field(src)
    i = int(rec[0]["index"])
    assert float(rec[0]["pressure"]) == pytest.approx(fld.data[i, 0], abs=1e-6)
    (row,) = _rows(tmp_path / "rt.csv")
    assert float(row["norm_mv_recon_error"]) < 1e-12


def test_info(capsys, vortex_bundle):
    _, bpath = vortex_bundle
    assert cli.main(["info", str(bpath)]) == 0
    info = json.loads(capsys.readouterr().out)
    assert info["header"]["scheme"] == "regular"
    assert info["size_report"]["reduced_bytes"] == bpath.stat().st_size
    assert info["q_histogram"] == {"6": 36}


def _sweep_cfg(tmp_path, **extra):
    cfg = tmp_path / "sweep.toml"
    lines = ['[input.synthetic]', 'grid = [48, 48]', 'd = 5', 'n_regions = 3', 'seed = 4', '[sweep]',
             'blocks = [8, 16]', 'schemes = ["regular", "kdtree", "slic"]', 'rates = [0.01, 0.05, 0.1]',
             'algorithms = ["combined"]', 'seeds = [0]', 'repeats = 1']
    cfg.write_text("\n".join(lines) + "\n")
    return cfg


def test_sweep_rows_and_determinism(tmp_path):
    cfg = _sweep_cfg(tmp_path)
    a, b = tmp_path / "a.csv", tmp_path / "b.csv"
    assert cli.main(["sweep", "--config", str(cfg), "-o", str(a), "--workers", "1"]) == 0
    assert cli.main(["sweep", "--config", str(cfg), "-o", str(b), "--workers", "4"]) == 0
    ra, rb = _rows(a), _rows(b)
    assert list(ra[0]) == cli.SWEEP_COLUMNS
    timing = {"t_partition", "t_reduce"}
    strip = lambda rows: [{k: v for k, v in r.items() if k not in timing} for r in rows]
    assert strip(ra) == strip(rb)
    assert all(float(r["t_partition"]) >= 0 and float(r["t_reduce"]) >= 0 for r in ra)
    assert [(r["block"], r["scheme"], r["rate"]) for r in ra] == [
        (str(bl), s, str(rt)) for bl in (8, 16) for s in ("regular", "kdtree", "slic") for rt in (0.01, 0.05, 0.1)
    ]
    # reduced size strictly increases with the sampling rate
    for bl in ("8", "16"):
        for s in ("regular", "kdtree", "slic"):
            sizes = [int(r["reduced_bytes"]) for r in ra if r["block"] == bl and r["scheme"] == s]
            assert sizes == sorted(sizes) and len(set(sizes)) == 3


# --- exit codes ------------------------------------------------------------

def test_config_errors_exit_2(tmp_path, gen_field):
    bad = tmp_path / "bad.toml"
    bad.write_text("x = [")
    assert cli.main(["reduce", "--config", str(bad), "-o", str(tmp_path / "o")]) == 2
    assert cli.main(["reduce", "-o", str(tmp_path / "o")]) == 2
    assert cli.main(["reduce", "--input", str(gen_field), "--scheme", "slic", "-o", str(tmp_path / "o")]) == 2
    assert cli.main(["reduce", "--input", str(gen_field), "--p", "1.5", "-o", str(tmp_path / "o")]) == 2
    assert cli.main(["sweep", "--input", str(gen_field), "--schemes", "voronoi", "-o", str(tmp_path / "o")]) == 2
    with pytest.raises(SystemExit) as exc:
        cli.main(["reduce", "--scheme", "hexagons"])
    assert exc.value.code == 2


def test_bad_query_exit_2(tmp_path, vortex_bundle):
    _, bpath = vortex_bundle
    assert cli.main(["query", str(bpath), "--query", "pressure", "-o", str(tmp_path / "q.csv")]) == 2
    assert cli.main(["query", str(bpath), "--query", "vorticity=1", "-o", str(tmp_path / "q.csv")]) == 2


def test_io_errors_exit_3(tmp_path, vortex_bundle):
    _, bpath = vortex_bundle
    assert cli.main(["info", str(tmp_path / "missing.mvrb")]) == 3
    raw = bytearray(bpath.read_bytes())
    raw[100] ^= 0xFF
    corrupt = tmp_path / "corrupt.mvrb"
    corrupt.write_bytes(bytes(raw))
    assert cli.main(["info", str(corrupt)]) == 3
    assert cli.main(["reduce", "--input", str(tmp_path / "none.json"), "-o", str(tmp_path / "o")]) == 3


def test_computation_error_exit_4(tmp_path, gen_field, monkeypatch):
    def broken(x):
        raise np.linalg.LinAlgError("eigh did not converge")

    monkeypatch.setattr(pca, "fit", broken)
    assert cli.main(["reduce", "--input", str(gen_field), "--block", "16", "-o", str(tmp_path / "o")]) == 4
