import csv

import numpy as np
import pytest

from twoscale import cli
from twoscale import experiments as ex
from twoscale.config import RunConfig, load_config, parse_config
from twoscale.errors import ConfigError


def _write_config(tmp_path, text, name="run.cfg"):
    p = tmp_path / name
    p.write_text(text)
    return p


def test_defaults_match_the_reference_setup():
    cfg = load_config(None)
    assert (cfg.a0, cfg.micro_amplitude, cfg.inv_epsilon, cfg.nu) == (5.0, 10.0, (7,), 2)
    assert cfg.fine_for(7) == cfg.folding_fine_for(7) == 87
    small = parse_config("epsilon.inverse = 3\n")
    # comparisons need inv*N + nu modes; folding needs the exact residue window
    assert (small.fine_for(3), small.folding_fine_for(3)) == (38, 37)


@pytest.mark.parametrize(
    "text, lineno, fragment",
    [
        ("lattice.a0 = 5\nbogus.key = 1\n", 2, "unknown key"),
        ("cutoffs.nu = 2\n\ncutoffs.nu = 3\n", 3, "already set on line 1"),
        ("# comment\ncutoffs.micro = 12.5\n", 2, "bad value"),
        ("families = F1 Q7\n", 1, "bad value"),
        ("just words\n", 1, "expected 'key = value'"),
    ],
)
def test_config_errors_carry_line_numbers(text, lineno, fragment):
    with pytest.raises(ConfigError) as info:
        parse_config(text, "run.cfg")
    assert f"run.cfg:{lineno}:" in str(info.value)
    assert fragment in str(info.value)


def test_config_semantic_validation():
    with pytest.raises(ConfigError, match="strictly increasing"):
        parse_config("sweeps.lambda = 1 0.5\n")
    with pytest.raises(ConfigError, match="a0"):
        parse_config("lattice.a0 = -1\n")


def test_grid_forms():
    cfg = parse_config("sweeps.mu = logspace(-2, -1, 3)\nsweeps.lambda = 0, 0.5 1\ncutoffs.fine = auto\n")
    assert np.allclose(cfg.mu_grid, [0.01, 10**-1.5, 0.1])
    assert cfg.lambda_grid == (0.0, 0.5, 1.0)
    assert cfg.fine_cutoff is None


def test_hash_ignores_formatting_but_not_values():
    a = parse_config("cutoffs.nu = 3\n")
    b = parse_config("  cutoffs.nu=3   # same\n")
    c = parse_config("cutoffs.nu = 4\n")
    assert a.config_hash() == b.config_hash() != c.config_hash()
    assert a.micro_key() == c.micro_key()
    assert parse_config("output.dir = elsewhere\n").config_hash() == RunConfig().config_hash()


def test_cache_roundtrip(tmp_path):
    cache_dir = tmp_path / "cache"
    first = ex.Context(RunConfig(), cache_dir)
    d1 = first.dirac
    fam1, blocks1 = first.family("F1")
    assert list(cache_dir.glob("micro-*.npz"))

    again = ex.Context(RunConfig(macro_lambda=1.5, macro_kind="honeycomb"), cache_dir)
    assert again.dirac.v_F == d1.v_F
    assert np.array_equal(again.dirac.w1, d1.w1)
    fam2, blocks2 = again.family("F1")
    assert np.array_equal(fam2.vectors, fam1.vectors)
    assert np.array_equal(blocks2.coupling_T, blocks1.coupling_T)
    assert again.notices == []

    changed = ex.Context(RunConfig(micro_amplitude=9.0), cache_dir)
    assert changed.dirac.v_F != d1.v_F
    assert changed.notices and "recomputed" in changed.notices[0]


def test_micro_command_writes_report_with_header(tmp_path, capsys):
    cfg = _write_config(tmp_path, f"output.dir = {tmp_path / 'out'}\n")
    assert cli.main(["micro", "--config", str(cfg)]) == cli.EXIT_OK
    report = (tmp_path / "out" / "micro_report.txt").read_text().splitlines()
    assert report[0] == f"# config_hash={load_config(cfg).config_hash()}"
    assert any(line.startswith("v_F = ") for line in report)


def test_config_error_exit_code(tmp_path, capsys):
    cfg = _write_config(tmp_path, "cutoffs.nu = two\n")
    assert cli.main(["micro", "--config", str(cfg)]) == cli.EXIT_CONFIG
    assert "run.cfg:1:" in capsys.readouterr().err
    assert cli.main(["micro", "--config", str(tmp_path / "missing.cfg")]) == cli.EXIT_CONFIG


def test_numerical_failure_exit_code(tmp_path, capsys):
    # a free electron has a threefold level at K, so no Dirac pair exists
    cfg = _write_config(tmp_path, f"potential.micro.amplitude = 0\ncutoffs.micro = 4\noutput.dir = {tmp_path}\n")
    assert cli.main(["micro", "--config", str(cfg), "--no-cache"]) == cli.EXIT_NUMERICAL
    assert "numerical failure" in capsys.readouterr().err


def test_failed_tolerance_exit_code(tmp_path, monkeypatch, capsys):
    monkeypatch.setitem(cli.HANDLERS, "micro", lambda ctx, w: [ex.upper_check("forced", 2.0, 1.0)])
    assert cli.run("micro", None, tmp_path) == cli.EXIT_TOLERANCE
    assert capsys.readouterr().out.startswith("FAIL")


def test_bands_with_no_families_is_exact_only(tmp_path):
    out = tmp_path / "out"
    cfg = _write_config(
        tmp_path,
        f"epsilon.inverse = 2\nfamilies =\npath.samples = 1\nbands.sources = exact effective\noutput.dir = {out}\n",
    )
    assert cli.main(["bands", "--config", str(cfg)]) == cli.EXIT_OK
    header = f"# config_hash={load_config(cfg).config_hash()}\n"
    for f in out.iterdir():
        if f.is_file():
            assert f.read_text().startswith(header), f.name
    with open(out / "bands.csv") as fh:
        rows = list(csv.DictReader(line for line in fh if not line.startswith("#")))
    assert {r["source"] for r in rows} == {"exact", "exact_unscaled"}
    assert len({r["sample_index"] for r in rows}) == 4


def test_folding_report_passes_for_small_inverses():
    ctx = ex.Context(parse_config("checks.inverse = 2 3\n"))
    checks = ex.folding_checks(ctx)
    assert checks and all(c.passed for c in checks), [c.line() for c in checks]


def test_ordering_check_counts_unmatched_points_as_violations():
    grid = [0.1, 0.2, 0.3]
    ok = ex.ordering_check("ok", grid, [1.0, 2.0, 3.0], [1.0, 2.5, 3.5])
    assert ok.passed and ok.value == 0.0
    worse = ex.ordering_check("worse", grid, [1.0, 2.6, 3.0], [1.0, 2.5, 3.5])
    assert not worse.passed and worse.value == pytest.approx(0.1)
    gap = ex.ordering_check("gap", grid, [1.0, np.nan, 3.0], [1.0, 2.5, 3.5])
    assert not gap.passed and "unmatched at [0.2]" in gap.detail
