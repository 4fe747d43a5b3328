"""FlowRecord persistence: a directory with manifest, arrays and CSV reports.

The manifest is flat key/value text; binary arrays are little-endian float64
with a one-line header, and every payload's SHA-256 goes into the manifest so
reloads detect corruption.  Identical configurations reproduce bit-identical
manifests (no timestamps inside the hashed section).
"""

import hashlib
import json
import os

import numpy as np

from . import initial_data as idm
from .domain import build_domain


class RecordError(RuntimeError):
    pass


def _sha(path):
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def write_array(path, arr):
    arr = np.asarray(arr, float)
    with open(path, "wb") as fh:
        head = f"stimcf-array v1 shape {' '.join(map(str, arr.shape))}\n"
        fh.write(head.encode())
        fh.write(arr.astype("<f8").tobytes(order="C"))


def read_array(path):
    with open(path, "rb") as fh:
        head = fh.readline().decode().strip().split()
        if head[:2] != ["stimcf-array", "v1"]:
            raise RecordError(f"bad array header in {path}")
        shape = tuple(int(s) for s in head[3:])
        data = np.frombuffer(fh.read(), dtype="<f8")
    return data.reshape(shape)


def save_record(rec, outdir, config=None):
    """Persist a FlowRecord.  `config` is the flat config dict used to build
    the run (needed to rebuild the domain on load)."""
    os.makedirs(outdir, exist_ok=True)
    dom = rec.domain
    write_array(os.path.join(outdir, "u.f64"), rec.solution.interior)
    if rec.imcf is not None:
        write_array(os.path.join(outdir, "u_imcf.f64"), rec.imcf.interior)
    if dom.kind == "radial":
        write_array(os.path.join(outdir, "r.f64"), dom.r)
    sweep_rows = []
    for i, eps in enumerate(rec.epsilons):
        row = {"eps": eps,
               "sup_delta": rec.sup_deltas[i - 1] if i > 0 else float("nan"),
               "trace": [[float(s), int(it), float(rn), bool(ok)]
                         for (s, it, rn, ok) in rec.traces[i]]}
        sweep_rows.append(row)
    with open(os.path.join(outdir, "sweep.json"), "w") as fh:
        json.dump({"rows": sweep_rows, "cauchy_ok": bool(rec.cauchy_ok),
                   "grad_increase_fraction": rec.grad_increase_fraction,
                   "suggestion": rec.suggestion}, fh, indent=1)
    with open(os.path.join(outdir, "jumps.csv"), "w") as fh:
        fh.write("t0,t_lo,t_hi,volume,inner_radius,outer_radius,cells\n")
        for j in getattr(rec, "jumps", []):
            fh.write("%.17g,%.17g,%.17g,%.17g,%.17g,%.17g,%d\n" % (
                j.value, j.t_lo, j.t_hi, j.volume,
                j.inner_radius or float("nan"),
                j.outer_radius or float("nan"), len(j.cells)))
    manifest = {}
    if config:
        for k, v in sorted(config.items()):
            manifest[f"config.{k}"] = v
    manifest["variant"] = rec.variant
    manifest["eps_schedule"] = " ".join("%.17g" % e for e in rec.epsilons)
    manifest["eps_last"] = "%.17g" % rec.eps_last
    manifest["bc"] = "%.17g" % rec.solution.bc
    manifest["residual_norm"] = "%.17g" % rec.solution.residual_norm
    manifest["domain.kind"] = dom.kind
    manifest["domain.h"] = "%.17g" % dom.h
    manifest["domain.L"] = "%.17g" % dom.L
    manifest["domain.alpha"] = "%.17g" % dom.alpha
    manifest["domain.R0"] = "%.17g" % dom.R0
    for name in ("u.f64", "u_imcf.f64", "r.f64", "sweep.json", "jumps.csv"):
        p = os.path.join(outdir, name)
        if os.path.exists(p):
            manifest[f"sha256.{name}"] = _sha(p)
    with open(os.path.join(outdir, "manifest.txt"), "w") as fh:
        for k in sorted(manifest):
            fh.write(f"{k} = {manifest[k]}\n")
    return outdir


def read_manifest(record_dir):
    path = os.path.join(record_dir, "manifest.txt")
    if not os.path.exists(path):
        raise RecordError(f"no manifest in {record_dir}")
    out = {}
    with open(path) as fh:
        for line in fh:
            if "=" in line:
                k, _, v = line.partition("=")
                out[k.strip()] = v.strip()
    return out


def verify_hashes(record_dir):
    man = read_manifest(record_dir)
    bad = []
    for k, v in man.items():
        if k.startswith("sha256."):
            name = k[len("sha256."):]
            p = os.path.join(record_dir, name)
            if not os.path.exists(p) or _sha(p) != v:
                bad.append(name)
    if bad:
        raise RecordError(f"hash mismatch in {record_dir}: {', '.join(bad)}")
    return True


def load_record(record_dir):
    """Rebuild a FlowRecord from a persisted directory (presets only).

    Solver state (u, IMCF reference) is restored exactly; sweep-tail fields
    are reconstructed from the final solution alone, which is enough for the
    verification suites.
    """
    from . import solver as sv
    from .weak_flow import FlowRecord, _gradient_data

    verify_hashes(record_dir)
    man = read_manifest(record_dir)
    preset = man.get("config.preset")
    if preset is None:
        raise RecordError("record has no preset config; cannot rebuild domain")
    params = {}
    if "config.mass" in man:
        params["m"] = float(man["config.mass"])
    if "config.n" in man:
        params["n"] = int(man["config.n"])
    ids = idm.build_preset(preset, **params)
    e0 = {"radius": float(man["config.e0_radius_chart"])}
    dom = build_domain(ids, e0, L=float(man["domain.L"]),
                       alpha=float(man["domain.alpha"]),
                       h=float(man["domain.h"]),
                       mode=man["domain.kind"])
    rec = FlowRecord(dom, man.get("variant", "stimcf"))
    u = read_array(os.path.join(record_dir, "u.f64"))
    eps_sched = [float(x) for x in man["eps_schedule"].split()]
    rec.epsilons = eps_sched
    bc = float(man["bc"])
    eps_last = float(man["eps_last"])
    sol = sv.ScalarSolution(dom, u, eps_last, 1.0, bc,
                            float(man["residual_norm"]), 0, True, 0.0,
                            variant=rec.variant)
    rec.solution = sol
    rec.tail = [(eps_last, u.copy(), _gradient_data(dom, sol))]
    p_im = os.path.join(record_dir, "u_imcf.f64")
    if os.path.exists(p_im):
        rec.imcf = sv.ScalarSolution(dom, read_array(p_im), eps_last, 0.0,
                                     bc, 0.0, 0, True, 0.0)
    with open(os.path.join(record_dir, "sweep.json")) as fh:
        sweep = json.load(fh)
    rec.cauchy_ok = sweep["cauchy_ok"]
    rec.grad_increase_fraction = sweep.get("grad_increase_fraction", [])
    rec.sup_deltas = [row["sup_delta"] for row in sweep["rows"][1:]]
    return rec


def save_checkpoint(path, dom, sol):
    """Solver checkpoint: domain fingerprint + (eps, s, u, residual)."""
    fp = domain_fingerprint(dom)
    with open(path, "wb") as fh:
        head = (f"stimcf-checkpoint v1 {fp} eps {sol.eps!r} s {sol.s!r} "
                f"bc {sol.bc!r} residual {sol.residual_norm!r}\n")
        fh.write(head.encode())
        fh.write(np.asarray(sol.interior, "<f8").tobytes())


def load_checkpoint(path, dom):
    from . import solver as sv
    with open(path, "rb") as fh:
        head = fh.readline().decode().split()
        if head[:2] != ["stimcf-checkpoint", "v1"]:
            raise RecordError("not a checkpoint file")
        fp = head[2]
        if fp != domain_fingerprint(dom):
            raise RecordError("checkpoint does not match this domain")
        eps = float(head[head.index("eps") + 1])
        s = float(head[head.index("s") + 1])
        bc = float(head[head.index("bc") + 1])
        resid = float(head[head.index("residual") + 1])
        u = np.frombuffer(fh.read(), dtype="<f8")
    return sv.ScalarSolution(dom, np.array(u), eps, s, bc, resid, 0, True, 0.0)


def domain_fingerprint(dom):
    h = hashlib.sha256()
    if dom.kind == "radial":
        h.update(dom.r.tobytes())
        h.update(dom.a.tobytes())
        h.update(dom.kr.tobytes())
    else:
        h.update(np.asarray(dom.shape).tobytes())
        h.update(dom.sdf.tobytes())
    h.update(np.float64(dom.L).tobytes())
    h.update(np.float64(dom.alpha).tobytes())
    return h.hexdigest()[:16]
