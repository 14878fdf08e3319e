"""Batch orchestration: simulate -> analyze -> fit -> report.

Records are processed independently, optionally across a process pool.
Results always come back in grid order and every output file has a single
writer (the parent process), so reruns with the same seed are byte-identical.
"""
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
import logging
import math
from pathlib import Path

import numpy as np

from . import io
from .fitting import MissingBaselineError, SweepDataset, run_staged_fit
from .hmm import analyze_record, bootstrap_powers
from .physics import (normalized_mean_occupation, normalized_trap_rate, phonon_release_rate,
                      trap_depth, trap_rate, TrapModelParams)
from .simulator import check_rates, point_sample_rate, sweep_rate_matrix, synthesize_point

log = logging.getLogger(__name__)

RECORD_DIR = "records"
MANIFEST = "manifest.json"
DATASET = "dataset.csv"
REPORT = "report.json"
FIGURES = "figures"
TRUTH_TABLE = "truth_comparison.csv"


def _map(fn, items, jobs):
    items = list(items)
    if jobs is None or jobs <= 1 or len(items) <= 1:
        return [fn(it) for it in items]
    with ProcessPoolExecutor(max_workers=int(jobs)) as pool:
        return list(pool.map(fn, items))


def grid_groups(cfg):
    """(T, flux, segment) groups in grid order; each holds every readout power."""
    g = cfg.grid
    return [(float(t), float(f), s) for t in g.temperatures_K for f in g.fluxes
            for s in range(cfg.simulator.segments)]


def check_grid(cfg):
    physics = cfg.physics_params()
    for t in cfg.grid.temperatures_K:
        for f in cfg.grid.fluxes:
            rates = sweep_rate_matrix(physics, f, t)
            check_rates(rates, point_sample_rate(rates, cfg.simulator.sample_rate_Hz,
                                                 cfg.simulator.rate_fraction))


def _synthesize(cfg, t, f, power, segment):
    s = cfg.simulator
    point = synthesize_point(cfg.physics_params(), cfg.emission_plan(), t, f, power, segment,
                             s.sample_rate_Hz, s.duration_s, s.seed, s.mode,
                             rate_fraction=s.rate_fraction)
    # analyze exactly what a file round trip would give back
    point.record.samples = point.record.samples.astype(np.float32).astype(np.float64)
    return point


def _truth(point):
    return {
        "T_K": point.temperature, "flux": point.flux, "power_dBm": point.power,
        "segment": point.segment, "seed": point.seed, "delta_a_ueV": point.delta_a,
        "gamma_trap_Hz": point.rates[0, 1], "gamma_release_Hz": point.rates[1, 0],
        "n_bar_path": point.truth.mean_occupation,
    }


# --------------------------------------------------------------------------
# simulate


def _simulate_group(args):
    cfg, out_dir, (t, f, seg), first = args
    entries = []
    for k, power in enumerate(cfg.grid.powers_dBm):
        idx = first + k
        point = _synthesize(cfg, t, f, float(power), seg)
        name = f"r{idx:06d}.absr"
        io.write_record(Path(out_dir) / RECORD_DIR / name, point.record)
        truth = _truth(point)
        io.write_json(Path(out_dir) / RECORD_DIR / f"r{idx:06d}.truth.json", truth)
        entries.append({"file": f"{RECORD_DIR}/{name}",
                        "truth": f"{RECORD_DIR}/r{idx:06d}.truth.json",
                        "T_K": t, "flux": f, "power_dBm": float(power), "segment": seg,
                        "seed": point.seed})
    return entries


def simulate(cfg, out_dir, jobs=1):
    """Write one record (plus truth sidecar) per grid point and a manifest."""
    check_grid(cfg)
    out_dir = Path(out_dir)
    (out_dir / RECORD_DIR).mkdir(parents=True, exist_ok=True)
    groups = grid_groups(cfg)
    n_pow = len(cfg.grid.powers_dBm)
    work = [(cfg, str(out_dir), g, i * n_pow) for i, g in enumerate(groups)]
    entries = [e for chunk in _map(_simulate_group, work, jobs) for e in chunk]
    manifest = {"config": cfg.to_dict(), "records": entries}
    io.write_json(out_dir / MANIFEST, manifest)
    return manifest


# --------------------------------------------------------------------------
# analyze


@dataclass
class RowSource:
    name: str
    record: object      # Record or None if unreadable
    segment: int
    error: str = ""


def _row(src, res, gap):
    rec = src.record
    return {
        "T_K": rec.temperature, "flux": rec.flux, "delta_a_ueV": trap_depth(rec.flux, gap),
        "gamma_trap_Hz": res.trap_rate, "gamma_release_Hz": res.release_rate,
        "n_bar": res.mean_occupation, "eff_fs_Hz": res.effective_sample_rate,
        "snr": res.achieved_snr, "flags": res.flags, "power_dBm": rec.power,
        "segment": src.segment, "record": src.name,
    }


def _failed_row(src, gap, flag, meta=None):
    rec = src.record
    t = rec.temperature if rec is not None else (meta or {}).get("T_K", math.nan)
    f = rec.flux if rec is not None else (meta or {}).get("flux", math.nan)
    p = rec.power if rec is not None else (meta or {}).get("power_dBm", math.nan)
    nan = math.nan
    return {"T_K": t, "flux": f,
            "delta_a_ueV": trap_depth(f, gap) if 0 <= f <= 1 else nan,
            "gamma_trap_Hz": nan, "gamma_release_Hz": nan, "n_bar": nan,
            "eff_fs_Hz": rec.sample_rate if rec is not None else nan, "snr": nan,
            "flags": (flag,), "power_dBm": p, "segment": src.segment, "record": src.name}


def analyze_group(sources, hmm, gap, bootstrap=True):
    """Rows for one (T, flux, segment) group, in descending power order."""
    ok = [s for s in sources if s.record is not None]
    rows = {s.name: _failed_row(s, gap, "unreadable") for s in sources if s.record is None}
    kw = dict(snr_min=hmm.snr_min, n_states=hmm.n_states, max_iter=hmm.max_iter, tol=hmm.tol,
              max_downsample=hmm.max_downsample)
    if bootstrap and len(ok) > 1:
        ordered = sorted(ok, key=lambda s: -s.record.power if not math.isnan(s.record.power)
                         else math.inf)
        results = bootstrap_powers([s.record for s in ordered], reuse_trans=hmm.reuse_trans, **kw)
        for src, res in zip(ordered, results):
            rows[src.name] = _row(src, res, gap)
        for src in ordered[len(results):]:
            rows[src.name] = _failed_row(src, gap, "not_attempted")
    else:
        for src in ok:
            rows[src.name] = _row(src, analyze_record(src.record, **kw), gap)
    return [rows[s.name] for s in sources]


def rows_to_dataset(rows):
    if not rows:
        return SweepDataset.empty()
    cols = {k: [r[k] for r in rows] for k in rows[0]}
    return SweepDataset(
        np.array(cols["T_K"], float), np.array(cols["flux"], float),
        np.array(cols["delta_a_ueV"], float), np.array(cols["gamma_trap_Hz"], float),
        np.array(cols["gamma_release_Hz"], float), np.array(cols["n_bar"], float),
        np.array(cols["eff_fs_Hz"], float), np.array(cols["snr"], float), cols["flags"],
        np.array(cols["power_dBm"], float), np.array(cols["segment"], int), cols["record"])


def _load(entry, base):
    name = entry["file"]
    try:
        rec = io.read_record(Path(base) / name)
        return RowSource(name, rec, int(entry.get("segment", 0)))
    except io.CorruptRecordError as err:
        log.error("%s", err)
        return RowSource(name, None, int(entry.get("segment", 0)), str(err))


def _analyze_entries(args):
    entries, base, hmm, gap = args
    sources = [_load(e, base) for e in entries]
    rows = analyze_group(sources, hmm, gap, hmm.bootstrap_powers)
    for r, e, s in zip(rows, entries, sources):
        if s.record is None:
            r.update({k: e[k] for k in ("T_K", "flux", "power_dBm") if k in e})
            r["delta_a_ueV"] = trap_depth(r["flux"], gap) if 0 <= r["flux"] <= 1 else math.nan
    return rows


def group_entries(entries):
    """Bucket manifest entries by (T, flux, segment), keeping first-seen order."""
    groups = {}
    for e in entries:
        key = (e.get("T_K"), e.get("flux"), e.get("segment", 0))
        groups.setdefault(key, []).append(e)
    return list(groups.values())


def analyze(cfg, manifest_path=None, record_paths=None, jobs=1):
    """Analyze records listed in a manifest (or given directly) into a dataset."""
    if manifest_path is not None:
        manifest = io.read_json(manifest_path)
        base = Path(manifest_path).parent
        entries = manifest.get("records", [])
    else:
        base = Path(".")
        entries = []
        for i, p in enumerate(record_paths or []):
            try:
                rec = io.read_record(p)
                entries.append({"file": str(p), "T_K": rec.temperature, "flux": rec.flux,
                                "power_dBm": rec.power, "segment": i})
            except io.CorruptRecordError:
                entries.append({"file": str(p), "segment": i})
    gap = cfg.physics.gap_ueV
    work = [(grp, str(base), cfg.hmm, gap) for grp in group_entries(entries)]
    rows = [r for chunk in _map(_analyze_entries, work, jobs) for r in chunk]
    return rows_to_dataset(rows), entries, base


def truth_comparison(dataset, entries, base):
    """Per-row relative errors against the truth sidecars, where present."""
    by_name = {e["file"]: e for e in entries}
    out = []
    for i, name in enumerate(dataset.record):
        e = by_name.get(name)
        if e is None or "truth" not in e or not (Path(base) / e["truth"]).exists():
            continue
        t = io.read_json(Path(base) / e["truth"])
        out.append((name, t["gamma_trap_Hz"], dataset.gamma_trap_Hz[i],
                    dataset.gamma_trap_Hz[i] / t["gamma_trap_Hz"] - 1.0,
                    t["gamma_release_Hz"], dataset.gamma_release_Hz[i],
                    dataset.gamma_release_Hz[i] / t["gamma_release_Hz"] - 1.0,
                    t["n_bar_path"], dataset.n_bar[i]))
    return out


TRUTH_HEADER = ("record", "true_gamma_trap_Hz", "gamma_trap_Hz", "trap_rel_err",
                "true_gamma_release_Hz", "gamma_release_Hz", "release_rel_err",
                "true_n_bar", "n_bar")


# --------------------------------------------------------------------------
# in-memory closed loop (no record files)


def _closed_loop_group(args):
    cfg, (t, f, seg) = args
    points = [_synthesize(cfg, t, f, float(p), seg) for p in cfg.grid.powers_dBm]
    sources = [RowSource(f"mem:{pt.seed}", pt.record, seg) for pt in points]
    rows = analyze_group(sources, cfg.hmm, cfg.physics.gap_ueV, cfg.hmm.bootstrap_powers)
    return rows, [_truth(pt) for pt in points]


def closed_loop(cfg, jobs=1):
    """Synthesize and analyze the configured sweep without touching disk.

    Returns the dataset and the per-row generating truth.
    """
    check_grid(cfg)
    out = _map(_closed_loop_group, [(cfg, g) for g in grid_groups(cfg)], jobs)
    rows = [r for chunk, _ in out for r in chunk]
    truth = [t for _, chunk in out for t in chunk]
    return rows_to_dataset(rows), truth


# --------------------------------------------------------------------------
# fit


def _fr(fr):
    return fr.as_dict()


def fit(dataset, cfg):
    """Run the staged protocol and return a JSON-ready report document."""
    fc = cfg.fit_config()
    report = {"n_rows": len(dataset), "n_usable": len(dataset.usable()),
              "fitting": cfg.to_dict()["fitting"], "warnings": []}
    try:
        res = run_staged_fit(dataset, fc)
    except MissingBaselineError as err:
        report["status"] = "failed"
        report["warnings"].append(f"missing baseline: {err}")
        return report
    except ValueError as err:
        report["status"] = "failed"
        report["warnings"].append(str(err))
        return report
    report["status"] = "ok"
    report["warnings"] += list(res.warnings)
    report["parameters"] = {
        "gap_ueV": {"value": res.stage1["gap"], "error": res.stage1.error("gap")},
        "beta_MHz_per_eV3": {"value": res.stage1["beta"], "error": res.stage1.error("beta")},
        "x_ne": {"value": res.stage2["x_ne"], "error": res.stage2.error("x_ne")},
        "alpha_MHz_per_K3": {"value": res.release["alpha"],
                             "error": res.release.error("alpha")},
    }
    report["stages"] = {"trap_stage1": _fr(res.stage1), "trap_stage2": _fr(res.stage2),
                        "release": _fr(res.release)}
    report["baselines"] = {
        name: {"delta_a_ueV": b.delta_a_ueV, "value": b.value, "t_max_K": b.t_max}
        for name, b in (("gamma_trap_Hz", res.trap_baseline),
                        ("gamma_release_Hz", res.release_baseline),
                        ("n_bar", res.occupation_baseline))}
    report["alpha_m"] = [
        {"delta_a_ueV": d, "alpha_m_per_K3": f["alpha_m"], "error": f.error("alpha_m"),
         "status": f.status}
        for d, f in zip(res.occupation.delta_a_ueV, res.occupation.fits)]
    c = res.consistency
    report["consistency"] = {
        "rows": [{"delta_a_ueV": d, "gamma_release0_Hz": m, "alpha_over_alpha_m_Hz": e,
                  "ratio": r}
                 for d, m, e, r in zip(c.delta_a_ueV, c.gamma_release0, c.alpha_over_alpha_m,
                                       c.ratio)],
        "nrms": c.nrms, "threshold": c.threshold, "flagged": c.flagged}
    return report


# --------------------------------------------------------------------------
# report tables


def _param(report, name):
    return float(report["parameters"][name]["value"])


def figure_tables(report, dataset, n_dense=121):
    """Plot-ready tables: {filename: (header, rows)}."""
    if report.get("status") != "ok":
        return {}
    gap = _param(report, "gap_ueV")
    beta = _param(report, "beta_MHz_per_eV3")
    x_ne = _param(report, "x_ne")
    alpha = _param(report, "alpha_MHz_per_K3")
    trap = TrapModelParams(beta, x_ne, gap)
    ds = dataset.usable().collapse()
    base = report["baselines"]
    rb = dict(zip(np.round(base["gamma_release_Hz"]["delta_a_ueV"], 9),
                  base["gamma_release_Hz"]["value"]))
    nb = dict(zip(np.round(base["n_bar"]["delta_a_ueV"], 9), base["n_bar"]["value"]))
    am = {round(r["delta_a_ueV"], 9): r["alpha_m_per_K3"] for r in report["alpha_m"]}
    tables = {}

    rows = [(t, d, g, float(trap_rate(d, t, trap)))
            for t, d, g in zip(ds.T_K, ds.delta_a_ueV, ds.gamma_trap_Hz)]
    tables["fig1_trap_rate_data.csv"] = (("T_K", "delta_a_ueV", "gamma_trap_Hz", "model_Hz"),
                                         rows)
    d_dense = np.linspace(ds.delta_a_ueV.min(), ds.delta_a_ueV.max(), n_dense)
    rows = [(t, d, float(trap_rate(d, t, trap))) for t in np.unique(ds.T_K) for d in d_dense]
    tables["fig1_trap_rate_curves.csv"] = (("T_K", "delta_a_ueV", "model_Hz"), rows)

    rows = []
    for t, d, g in zip(ds.T_K, ds.delta_a_ueV, ds.gamma_release_Hz):
        rows.append((t, d, g - rb[round(d, 9)], float(phonon_release_rate(d, t, alpha))))
    tables["fig2_release_rate_data.csv"] = (
        ("T_K", "delta_a_ueV", "excess_release_Hz", "model_Hz"), rows)
    t_dense = np.linspace(ds.T_K.min(), ds.T_K.max(), n_dense)
    rows = [(t, d, float(phonon_release_rate(d, t, alpha)))
            for d in np.unique(ds.delta_a_ueV) for t in t_dense]
    tables["fig2_release_rate_curves.csv"] = (("T_K", "delta_a_ueV", "model_Hz"), rows)

    rows = []
    for t, d, n in zip(ds.T_K, ds.delta_a_ueV, ds.n_bar):
        a = am[round(d, 9)]
        rows.append((t, d, n / nb[round(d, 9)],
                     float(normalized_mean_occupation(d, t, x_ne, gap, a))))
    tables["fig3_mean_occupation_data.csv"] = (
        ("T_K", "delta_a_ueV", "normalized_n_bar", "model"), rows)
    rows = [(t, d, float(normalized_mean_occupation(d, t, x_ne, gap, am[round(d, 9)])))
            for d in np.unique(ds.delta_a_ueV) for t in t_dense]
    tables["fig3_mean_occupation_curves.csv"] = (("T_K", "delta_a_ueV", "model"), rows)

    rows = [(r["delta_a_ueV"], r["gamma_release0_Hz"], r["alpha_over_alpha_m_Hz"])
            for r in report["consistency"]["rows"]]
    tables["fig4_readout_clearing.csv"] = (
        ("delta_a_ueV", "gamma_release0_Hz", "alpha_over_alpha_m_Hz"), rows)
    return tables


def write_figures(report, dataset, out_dir):
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []
    for name, (header, rows) in sorted(figure_tables(report, dataset).items()):
        written.append(io.write_table(out_dir / name, header, rows))
    return written


# --------------------------------------------------------------------------
# end to end


def run(cfg, out_dir, jobs=1):
    out_dir = Path(out_dir)
    simulate(cfg, out_dir, jobs)
    dataset, entries, base = analyze(cfg, manifest_path=out_dir / MANIFEST, jobs=jobs)
    io.write_dataset(out_dir / DATASET, dataset)
    if cfg.output.compare_truth:
        io.write_table(out_dir / TRUTH_TABLE, TRUTH_HEADER,
                       truth_comparison(dataset, entries, base))
    report = fit(dataset, cfg)
    io.write_json(out_dir / REPORT, report)
    write_figures(report, dataset, out_dir / FIGURES)
    return report
