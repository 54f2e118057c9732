"""Model checkpoint container.

A checkpoint is one ``.npz`` archive holding every learnable parameter
(``param::{name}``), every normalization layer's running state
(``norm::{name}::{field}``), and a ``__meta__`` JSON blob with the model
configuration, the training configuration, a content signature of the
feature layout the model was trained on, and bookkeeping such as the best
validation loss.  Loading rebuilds the model from the stored configuration
and overwrites its arrays, so a save/load round trip is bitwise exact.
"""

from __future__ import annotations

import hashlib
import json
from pathlib import Path

import numpy as np

from .config import ModelConfig, TrainConfig
from .errors import CheckpointError
from .model import TpcModel

FORMAT_VERSION = 1


def feature_signature(
    feature_names: list[str], static_names: list[str], diagnosis_names: list[str]
) -> str:
    """Order-sensitive digest of the column layout a model was fit to."""
    payload = json.dumps(
        {
            "features": list(feature_names),
            "static": list(static_names),
            "diagnoses": list(diagnosis_names),
        },
        sort_keys=True,
    )
    return hashlib.sha256(payload.encode("utf-8")).hexdigest()


def save_checkpoint(
    path: str | Path,
    model: TpcModel,
    *,
    train_config: TrainConfig | None = None,
    signature: str | None = None,
    extra: dict | None = None,
) -> Path:
    path = Path(path)
    arrays: dict[str, np.ndarray] = {}
    for name, tensor in model.parameters():
        arrays[f"param::{name}"] = tensor.data
    for name, norm in model.norms():
        for field, arr in norm.state_arrays().items():
            arrays[f"norm::{name}::{field}"] = arr
    meta = {
        "format_version": FORMAT_VERSION,
        "model": model.config.to_dict(),
        "train": train_config.to_dict() if train_config is not None else None,
        "signature": signature,
    }
    if extra:
        meta.update(extra)
    arrays["__meta__"] = np.frombuffer(
        json.dumps(meta, sort_keys=True).encode("utf-8"), dtype=np.uint8
    )
    path.parent.mkdir(parents=True, exist_ok=True)
    np.savez_compressed(path, **arrays)
    return path


def read_meta(path: str | Path) -> dict:
    with np.load(path) as archive:
        if "__meta__" not in archive:
            raise CheckpointError(f"{path} has no metadata record")
        return json.loads(bytes(archive["__meta__"]).decode("utf-8"))


def load_checkpoint(path: str | Path, expected_signature: str | None = None):
    """Rebuild the model stored at ``path``.

    Returns ``(model, meta)``.  When ``expected_signature`` is given, a
    mismatch with the stored feature signature raises ``CheckpointError``
    rather than silently evaluating on differently laid-out data.
    """
    path = Path(path)
    if not path.exists():
        raise CheckpointError(f"checkpoint not found: {path}")
    with np.load(path) as archive:
        if "__meta__" not in archive:
            raise CheckpointError(f"{path} has no metadata record")
        meta = json.loads(bytes(archive["__meta__"]).decode("utf-8"))
        if meta.get("format_version") != FORMAT_VERSION:
            raise CheckpointError(
                f"unsupported checkpoint format {meta.get('format_version')!r}"
            )
        if expected_signature is not None and meta.get("signature") != expected_signature:
            raise CheckpointError(
                "feature layout mismatch: the checkpoint was trained on a "
                "different column layout than the dataset being evaluated"
            )
        config = ModelConfig(**meta["model"])
        model = TpcModel(config)
        for name, tensor in model.parameters():
            key = f"param::{name}"
            if key not in archive:
                raise CheckpointError(f"missing parameter array {name!r}")
            stored = archive[key]
            if stored.shape != tensor.data.shape:
                raise CheckpointError(
                    f"parameter {name!r} has shape {stored.shape}, expected {tensor.data.shape}"
                )
            tensor.data[...] = stored
        for name, norm in model.norms():
            norm.load_state(
                archive[f"norm::{name}::running_mean"],
                archive[f"norm::{name}::running_var"],
                int(archive[f"norm::{name}::updates"][0]),
            )
    return model, meta
