import json
import logging
import os

import numpy as np

logger = logging.getLogger(__name__)

# Stream tags used when splitting the top-level seed
STREAM_CHAIN = 1
STREAM_PREDICT = 2
STREAM_GENERATE = 3
STREAM_GEWEKE = 4


def rng_stream(seed, *keys):
    """Create an independent random generator for one unit of work.

    The top-level seed is split with a counter-based rule: the same
    (seed, keys) pair always yields the same stream, no matter which other
    streams were created before it, so any subset of work (one fold, one
    chain) can be reproduced in isolation.

    Args:
        seed (int): Top-level seed
        *keys (int): Path of non-negative integers identifying the unit of work,
            e.g. (STREAM_CHAIN, fold, chain)

    Returns:
        numpy.random.Generator: Generator seeded from the spawned sequence
    """
    sequence = np.random.SeedSequence(entropy=int(seed), spawn_key=tuple(int(k) for k in keys))
    return np.random.default_rng(sequence)


def create_class_mapping(label_values):
    """Map class names to integer ids in order of first appearance.

    Args:
        label_values (iterable): Class label of every subject

    Returns:
        dict: Mapping from class names to class ids
    """
    class_map = {}
    for value in label_values:
        if value not in class_map:
            class_map[value] = len(class_map)

    logger.info(f"Found {len(class_map)} classes: {class_map}")
    return class_map


def to_serializable(obj):
    """Convert numpy containers and scalars to plain Python for JSON output."""
    if isinstance(obj, dict):
        return {str(key): to_serializable(value) for key, value in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [to_serializable(value) for value in obj]
    if isinstance(obj, np.ndarray):
        return to_serializable(obj.tolist())
    if isinstance(obj, np.bool_):
        return bool(obj)
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        value = float(obj)
        # JSON has no representation for nan/inf
        return value if np.isfinite(value) else None
    return obj


def save_json(obj, path):
    """Write an object as indented JSON with sorted keys.

    Args:
        obj: Dict/list possibly containing numpy values
        path (str or Path): Output file
    """
    directory = os.path.dirname(os.fspath(path))
    if directory:
        os.makedirs(directory, exist_ok=True)
    with open(path, 'w', encoding='utf-8') as f:
        json.dump(to_serializable(obj), f, indent=2, sort_keys=True)
        f.write("\n")


def load_json(path):
    """Read a JSON document.

    Raises:
        FileNotFoundError: If the file does not exist
        ValueError: If the file is not valid JSON
    """
    try:
        with open(path, 'r', encoding='utf-8') as f:
            return json.load(f)
    except FileNotFoundError:
        raise FileNotFoundError(f"File not found: {path}")
    except json.JSONDecodeError as e:
        raise ValueError(f"Invalid JSON in {path}: {e}")
