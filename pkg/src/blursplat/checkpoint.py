"""Model checkpoints: a directory of little-endian float32 arrays plus
JSON metadata. Writes are byte-deterministic so identical training runs
produce identical checkpoints.
"""

import json
import os

import numpy as np

from .articulation import KinematicChain, Pose
from .blur import ExposureTrajectory
from .model import AvatarModel, AvatarNets
from .scene import GaussianCloud
from .tinynet import DenseNet

FORMAT_VERSION = 1

_CLOUD_FIELDS = ("positions", "log_scales", "rotations", "opacity_logits",
                 "color_features")


def _save_array(path, arr):
    np.save(path, np.asarray(arr).astype("<f4"), allow_pickle=False)


def _load_array(path):
    return np.load(path, allow_pickle=False).astype(np.float64)


def save_checkpoint(path, model: AvatarModel, trajectories=None,
                    frame_embeddings=None, iteration=0, extra_meta=None):
    """Write the model (and optional trajectories/embeddings) under `path`."""
    os.makedirs(os.path.join(path, "cloud"), exist_ok=True)
    os.makedirs(os.path.join(path, "nets"), exist_ok=True)
    meta = {
        "format_version": FORMAT_VERSION,
        "iteration": int(iteration),
        "n_gaussians": int(model.cloud.n),
        "feature_dim": int(model.cloud.feature_dim),
        "n_joints": int(model.chain.n_joints),
    }
    if extra_meta:
        meta.update(extra_meta)
    with open(os.path.join(path, "meta.json"), "w") as f:
        json.dump(meta, f, indent=2, sort_keys=True)
    with open(os.path.join(path, "chain.json"), "w") as f:
        json.dump(model.chain.to_dict(), f, indent=2, sort_keys=True)

    for name in _CLOUD_FIELDS:
        _save_array(os.path.join(path, "cloud", f"{name}.npy"),
                    getattr(model.cloud, name))

    net_specs = {}
    for net_name, net in model.nets.named():
        net_specs[net_name] = {"activations": list(net.activations)}
        for p_name, p in net.named_params():
            _save_array(os.path.join(path, "nets", f"{net_name}.{p_name}.npy"), p)
    with open(os.path.join(path, "nets.json"), "w") as f:
        json.dump(net_specs, f, indent=2, sort_keys=True)

    if frame_embeddings is not None:
        _save_array(os.path.join(path, "embeddings.npy"), frame_embeddings)
    if trajectories is not None:
        with open(os.path.join(path, "trajectories.json"), "w") as f:
            json.dump([t.to_dict() for t in trajectories], f, indent=2,
                      sort_keys=True)


def load_checkpoint(path):
    """Read a checkpoint directory. Returns (model, trajectories,
    frame_embeddings, meta); missing optional parts come back as None."""
    meta_path = os.path.join(path, "meta.json")
    try:
        with open(meta_path) as f:
            meta = json.load(f)
    except FileNotFoundError:
        raise ValueError(f"{path}: no checkpoint found (missing meta.json)") from None
    except json.JSONDecodeError as exc:
        raise ValueError(f"{meta_path}: corrupt checkpoint metadata: {exc}") from None
    if meta.get("format_version") != FORMAT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint format "
                         f"{meta.get('format_version')!r}")
    with open(os.path.join(path, "chain.json")) as f:
        chain = KinematicChain.from_dict(json.load(f))

    fields = {name: _load_array(os.path.join(path, "cloud", f"{name}.npy"))
              for name in _CLOUD_FIELDS}
    cloud = GaussianCloud(**fields)

    with open(os.path.join(path, "nets.json")) as f:
        net_specs = json.load(f)
    nets = {}
    for net_name, spec in net_specs.items():
        weights, biases = [], []
        for i in range(len(spec["activations"])):
            weights.append(_load_array(
                os.path.join(path, "nets", f"{net_name}.W{i}.npy")))
            biases.append(_load_array(
                os.path.join(path, "nets", f"{net_name}.b{i}.npy")))
        nets[net_name] = DenseNet(weights=weights, biases=biases,
                                  activations=list(spec["activations"]))
    model = AvatarModel(chain=chain, cloud=cloud, nets=AvatarNets(**nets))

    embeddings = None
    emb_path = os.path.join(path, "embeddings.npy")
    if os.path.exists(emb_path):
        embeddings = _load_array(emb_path)

    trajectories = None
    traj_path = os.path.join(path, "trajectories.json")
    if os.path.exists(traj_path):
        with open(traj_path) as f:
            trajectories = [ExposureTrajectory.from_dict(d) for d in json.load(f)]
    return model, trajectories, embeddings, meta
