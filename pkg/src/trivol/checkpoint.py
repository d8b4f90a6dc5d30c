"""Single-file checkpoint container.

Layout: 8-byte magic ``TRIVOLCK``, a little-endian uint64 header length, a JSON
header, then the concatenated raw array payload. The header records the format
version, architecture fingerprint, stage tag, seed, a sha256 of the payload
(integrity check), per-array metadata (name, dtype, shape, offset), and a free
``extras`` dict used for optimizer/RNG state in periodic checkpoints.

Round trips are bitwise exact.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .backbone import FeatureExtractor, ProjectionHead
from .config import ExperimentConfig, architecture_fingerprint
from .errors import IncompatibilityError, IntegrityError

MAGIC = b"TRIVOLCK"
FORMAT_VERSION = 1

STAGE_TAGS = ("theta_init", "theta_prime", "psi_init", "psi_prime", "psi_final")


@dataclass
class ModelWeights:
    """Named parameter arrays for an extractor (+ optional head), tagged with the
    training stage that produced them and the architecture fingerprint."""

    arrays: dict[str, np.ndarray]
    stage: str
    fingerprint: str
    seed: int
    head_kind: str | None = None
    extras: dict = field(default_factory=dict)

    def checksum(self) -> str:
        h = hashlib.sha256()
        for name in sorted(self.arrays):
            h.update(name.encode())
            h.update(self.arrays[name].tobytes())
        return h.hexdigest()

    @classmethod
    def from_model(cls, extractor: FeatureExtractor, head: ProjectionHead | None,
                   stage: str, config: ExperimentConfig, seed: int,
                   extras: dict | None = None) -> "ModelWeights":
        arrays = {}
        for name, t in extractor.state_dict().items():
            arrays[f"extractor.{name}"] = t.detach().cpu().contiguous().numpy().copy()
        head_kind = None
        if head is not None:
            head_kind = head.kind
            for name, t in head.state_dict().items():
                arrays[f"head.{name}"] = t.detach().cpu().contiguous().numpy().copy()
        return cls(arrays=arrays, stage=stage, fingerprint=architecture_fingerprint(config),
                   seed=seed, head_kind=head_kind, extras=dict(extras or {}))

    def apply_to(self, extractor: FeatureExtractor, head: ProjectionHead | None = None) -> None:
        """Load arrays into the modules. ``head=None`` loads the extractor only
        (e.g. when an SSL-stage checkpoint seeds a classifier's extractor)."""
        ext_state = {k[len("extractor."):]: torch.from_numpy(v.copy())
                     for k, v in self.arrays.items() if k.startswith("extractor.")}
        extractor.load_state_dict(ext_state, strict=True)
        if head is not None:
            if self.head_kind is None:
                raise IncompatibilityError(f"checkpoint (stage {self.stage}) carries no head weights")
            if self.head_kind != head.kind:
                raise IncompatibilityError(
                    f"checkpoint head kind {self.head_kind!r} does not match target head {head.kind!r}"
                )
            head_state = {k[len("head."):]: torch.from_numpy(v.copy())
                          for k, v in self.arrays.items() if k.startswith("head.")}
            head.load_state_dict(head_state, strict=True)


def save_weights(weights: ModelWeights, path: str | Path) -> Path:
    if weights.stage not in STAGE_TAGS:
        from .errors import ConfigurationError

        raise ConfigurationError(f"unknown stage tag {weights.stage!r}; expected one of {STAGE_TAGS}")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    names = sorted(weights.arrays)
    payload = bytearray()
    entries = []
    for name in names:
        arr = np.ascontiguousarray(weights.arrays[name])
        entries.append({"name": name, "dtype": arr.dtype.str, "shape": list(arr.shape),
                        "offset": len(payload), "nbytes": arr.nbytes})
        payload += arr.tobytes()
    header = {
        "format_version": FORMAT_VERSION,
        "fingerprint": weights.fingerprint,
        "stage": weights.stage,
        "seed": weights.seed,
        "head_kind": weights.head_kind,
        "payload_sha256": hashlib.sha256(bytes(payload)).hexdigest(),
        "arrays": entries,
        "extras": weights.extras,
    }
    header_bytes = json.dumps(header, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<Q", len(header_bytes)))
        fh.write(header_bytes)
        fh.write(bytes(payload))
    return path


def load_weights(path: str | Path, config: ExperimentConfig | None = None) -> ModelWeights:
    """Read a checkpoint; verifies magic, payload hash, and (when ``config`` is
    given) the architecture fingerprint."""
    path = Path(path)
    try:
        blob = path.read_bytes()
    except OSError as exc:
        raise IntegrityError(f"cannot read checkpoint {path}: {exc}") from exc
    if len(blob) < len(MAGIC) + 8 or blob[: len(MAGIC)] != MAGIC:
        raise IntegrityError(f"{path} is not a trivol checkpoint (bad magic)")
    (header_len,) = struct.unpack_from("<Q", blob, len(MAGIC))
    header_start = len(MAGIC) + 8
    try:
        header = json.loads(blob[header_start: header_start + header_len])
    except (ValueError, UnicodeDecodeError) as exc:
        raise IntegrityError(f"{path}: corrupt header: {exc}") from exc
    if header.get("format_version") != FORMAT_VERSION:
        raise IntegrityError(f"{path}: unsupported format version {header.get('format_version')}")
    payload = blob[header_start + header_len:]
    if hashlib.sha256(payload).hexdigest() != header["payload_sha256"]:
        raise IntegrityError(f"{path}: payload checksum mismatch (file corrupt)")
    if config is not None:
        expected = architecture_fingerprint(config)
        if header["fingerprint"] != expected:
            raise IncompatibilityError(
                f"{path}: checkpoint fingerprint {header['fingerprint']} does not match "
                f"the configured architecture ({expected})"
            )
    arrays = {}
    for entry in header["arrays"]:
        raw = payload[entry["offset"]: entry["offset"] + entry["nbytes"]]
        arrays[entry["name"]] = np.frombuffer(raw, dtype=np.dtype(entry["dtype"])).reshape(entry["shape"]).copy()
    return ModelWeights(arrays=arrays, stage=header["stage"], fingerprint=header["fingerprint"],
                        seed=header["seed"], head_kind=header.get("head_kind"),
                        extras=header.get("extras", {}))


def file_sha256(path: str | Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()
