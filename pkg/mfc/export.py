"""
Artifact writers: JSON documents and CSV tables that all carry the hash of
the configuration that produced them.

CSV files start with a `# config_hash=<hash>` line followed by a fixed header.
Floats are written with 17 significant digits.
"""

import csv
import hashlib
import json
import logging
import os
from datetime import datetime, timezone
from typing import Any, Dict, Iterable, List, Sequence

import numpy as np

logger = logging.getLogger(__name__)

QUADRUPLE_COLUMNS = ['node', 'atom', 'scenario', 'dim', 'Y', 'Z', 'u']
CONVERGENCE_COLUMNS = ['iteration', 'first_order_residual']
NORM_COLUMNS = ['node', 'time', 'Y_norm', 'Z_norm', 'u_norm']
PROBE_COLUMNS = ['x', 'raw', 'normalized', 'grad', 'bound_ratio']
FIELD_COLUMNS = ['atom', 'scenario', 'dim', 'value']


def config_hash(payload: Dict[str, Any]) -> str:
    """First 16 hex digits of the SHA-256 of the sorted JSON encoding."""
    encoded = json.dumps(to_jsonable(payload), sort_keys=True, separators=(',', ':'))
    return hashlib.sha256(encoded.encode('utf-8')).hexdigest()[:16]


def format_float(value: float) -> str:
    return f"{float(value):.17g}"


def to_jsonable(value: Any) -> Any:
    """numpy scalars and arrays to plain Python containers."""
    if isinstance(value, dict):
        return {str(key): to_jsonable(item) for key, item in value.items()}
    if isinstance(value, (list, tuple)):
        return [to_jsonable(item) for item in value]
    if isinstance(value, np.ndarray):
        return to_jsonable(value.tolist())
    if isinstance(value, np.integer):
        return int(value)
    if isinstance(value, np.floating):
        return float(value)
    if isinstance(value, np.bool_):
        return bool(value)
    return value


def write_json(path: str, payload: Dict[str, Any], digest: str, timestamp: bool = False) -> str:
    document = {'config_hash': digest, **to_jsonable(payload)}
    if timestamp:
        document['generated_at'] = datetime.now(timezone.utc).isoformat()
    os.makedirs(os.path.dirname(path) or '.', exist_ok=True)
    with open(path, 'w', encoding='utf-8') as handle:
        json.dump(document, handle, indent=2, sort_keys=True)
        handle.write('\n')
    logger.debug(f"📝 Wrote {path}")
    return path


def _cell(value: Any) -> str:
    if isinstance(value, (float, np.floating)):
        return format_float(value)
    if isinstance(value, (list, tuple, np.ndarray)):
        return ' '.join(_cell(item) for item in np.ravel(value))
    return '' if value is None else str(value)


def write_csv(path: str, columns: Sequence[str], rows: Iterable[Sequence[Any]], digest: str) -> str:
    os.makedirs(os.path.dirname(path) or '.', exist_ok=True)
    count = 0
    with open(path, 'w', encoding='utf-8', newline='') as handle:
        handle.write(f"# config_hash={digest}\n")
        writer = csv.writer(handle, lineterminator='\n')
        writer.writerow(columns)
        for row in rows:
            if len(row) != len(columns):
                raise ValueError(f"row of length {len(row)} does not match columns {list(columns)}")
            writer.writerow([_cell(value) for value in row])
            count += 1
    logger.debug(f"📝 Wrote {count} rows to {path}")
    return path


def quadruple_rows(quad) -> Iterable[List[Any]]:
    """One row per (node, atom, scenario, dim); u is blank at the terminal node."""
    Y, Z, u = quad.Y.values, quad.Z.values, quad.u.values
    L, M, K, n = Y.shape
    for k in range(L):
        for m in range(M):
            for s in range(K):
                for d in range(n):
                    control = float(u[k, m, s, d]) if k < u.shape[0] else None
                    yield [k, m, s, d, float(Y[k, m, s, d]), float(Z[k, m, s, d]), control]


def write_quadruple(path: str, quad, digest: str) -> str:
    return write_csv(path, QUADRUPLE_COLUMNS, quadruple_rows(quad), digest)


def field_rows(field) -> Iterable[List[Any]]:
    """One row per (atom, scenario, dim); matrix entries are flattened row-major into dim."""
    values = np.asarray(getattr(field, 'values', field), dtype=float)
    if values.ndim < 3:
        raise ValueError(f"field values must be (M, K, ...), got shape {values.shape}")
    M, K = values.shape[:2]
    flat = values.reshape(M, K, -1)
    for m in range(M):
        for s in range(K):
            for d in range(flat.shape[2]):
                yield [m, s, d, float(flat[m, s, d])]


def write_field(path: str, field, digest: str) -> str:
    return write_csv(path, FIELD_COLUMNS, field_rows(field), digest)


def write_convergence(path: str, history: Sequence[float], digest: str) -> str:
    return write_csv(path, CONVERGENCE_COLUMNS, ([i, float(r)] for i, r in enumerate(history)), digest)


def write_norms(path: str, quad, digest: str) -> str:
    norms = quad.node_norms()
    times = quad.problem.grid.nodes
    rows = []
    for k in range(len(norms['Y'])):
        u_norm = norms['u'][k] if k < len(norms['u']) else None
        rows.append([k, float(times[k]), norms['Y'][k], norms['Z'][k], u_norm])
    return write_csv(path, NORM_COLUMNS, rows, digest)


def write_probe_table(path: str, records: Sequence[Dict[str, Any]], digest: str) -> str:
    rows = ([record.get(column) for column in PROBE_COLUMNS] for record in records)
    return write_csv(path, PROBE_COLUMNS, rows, digest)
