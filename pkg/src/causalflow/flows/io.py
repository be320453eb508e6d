"""Text serialization for flow models.

Files are JSON with every float written via repr, which round-trips
exactly; two models with identical parameters produce byte-identical
files. MADE masks are not stored: they are a pure function of the
recorded architecture and are rebuilt on load.
"""

from __future__ import annotations

import json
from pathlib import Path

from ..errors import ConfigError
from ..numerics import net_from_dict, net_to_dict
from .base import OutcomeTransform, Standardizer
from .made import MadeAffineLayer, ReverseLayer, made_masks
from .models import ConditionalFlow, DensityFlow, FlowEnsemble
from .spline import SplineTransform

FORMAT_VERSION = 1


def flow_to_dict(flow) -> dict:
    if isinstance(flow, FlowEnsemble):
        return {
            "format_version": FORMAT_VERSION,
            "type": "flow_ensemble",
            "members": [flow_to_dict(m) for m in flow.members],
        }
    if isinstance(flow, ConditionalFlow):
        return {
            "format_version": FORMAT_VERSION,
            "type": "conditional_flow",
            "cov_standardizer": flow.cov_standardizer.to_dict(),
            "outcome_transform": flow.outcome_transform.to_dict(),
            "transforms": [
                {
                    "n_bins": t.n_bins,
                    "bound": repr(float(t.bound)),
                    "min_bin": repr(float(t.min_bin)),
                    "min_derivative": repr(float(t.min_derivative)),
                    "conditioner": net_to_dict(t.conditioner),
                }
                for t in flow.transforms
            ],
        }
    if isinstance(flow, DensityFlow):
        layers = []
        for layer in flow.layers:
            if isinstance(layer, MadeAffineLayer):
                layers.append(
                    {
                        "kind": "made_affine",
                        "hidden_widths": layer.hidden_widths,
                        "net": net_to_dict(layer.net),
                    }
                )
            elif isinstance(layer, ReverseLayer):
                layers.append({"kind": "reverse"})
            else:
                raise ConfigError(f"cannot serialize layer {type(layer).__name__}")
        return {
            "format_version": FORMAT_VERSION,
            "type": "density_flow",
            "standardizer": flow.standardizer.to_dict(),
            "layers": layers,
        }
    raise ConfigError(f"cannot serialize {type(flow).__name__}")


def flow_from_dict(d: dict):
    if d.get("format_version") != FORMAT_VERSION:
        raise ConfigError(f"unsupported flow format {d.get('format_version')!r}")
    kind = d.get("type")
    if kind == "flow_ensemble":
        members = [flow_from_dict(m) for m in d["members"]]
        return FlowEnsemble(members, required_members=len(members))
    if kind == "conditional_flow":
        transforms = []
        for td in d["transforms"]:
            transforms.append(
                SplineTransform(
                    net_from_dict(td["conditioner"]),
                    n_bins=int(td["n_bins"]),
                    bound=float(td["bound"]),
                    min_bin=float(td["min_bin"]),
                    min_derivative=float(td["min_derivative"]),
                )
            )
        return ConditionalFlow(
            Standardizer.from_dict(d["cov_standardizer"]),
            OutcomeTransform.from_dict(d["outcome_transform"]),
            transforms,
        )
    if kind == "density_flow":
        std = Standardizer.from_dict(d["standardizer"])
        layers = []
        for ld in d["layers"]:
            if ld["kind"] == "made_affine":
                widths = [int(w) for w in ld["hidden_widths"]]
                masks = made_masks(std.dim, widths)
                net = net_from_dict(ld["net"], masks=masks)
                layers.append(MadeAffineLayer(net, std.dim, widths))
            elif ld["kind"] == "reverse":
                layers.append(ReverseLayer(std.dim))
            else:
                raise ConfigError(f"unknown layer kind {ld['kind']!r}")
        return DensityFlow(std, layers)
    raise ConfigError(f"unknown flow type {kind!r}")


def dump_json(obj: dict, path: str | Path) -> None:
    """Stable rendering: sorted keys, fixed separators, trailing newline."""
    text = json.dumps(obj, indent=2, sort_keys=True)
    Path(path).write_text(text + "\n")


def load_json(path: str | Path) -> dict:
    try:
        return json.loads(Path(path).read_text())
    except FileNotFoundError:
        raise ConfigError(f"file not found: {path}")
    except json.JSONDecodeError as exc:
        raise ConfigError(f"malformed JSON in {path}: {exc}")


def save_flow(flow, path: str | Path) -> None:
    dump_json(flow_to_dict(flow), path)


def load_flow(path: str | Path):
    return flow_from_dict(load_json(path))
