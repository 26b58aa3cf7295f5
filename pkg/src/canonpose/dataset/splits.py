from dataclasses import dataclass

import numpy as np

from ..errors import ConfigError, EmptyTrainError


@dataclass
class SplitPlan:
    """One subject-group x pose-group cross-validation fold.

    Samples that share only a subject or only a pose with the test cell are in
    neither list.
    """

    train_samples: list
    test_samples: list
    held_out_subjects: frozenset
    held_out_poses: frozenset
    fold: tuple = (0, 0)

    def to_dict(self):
        return {
            "fold": list(self.fold),
            "train_samples": list(self.train_samples),
            "test_samples": list(self.test_samples),
            "held_out_subjects": sorted(self.held_out_subjects),
            "held_out_poses": sorted(self.held_out_poses),
        }

    @classmethod
    def from_dict(cls, d):
        return cls(list(d["train_samples"]), list(d["test_samples"]), frozenset(d["held_out_subjects"]),
                   frozenset(d["held_out_poses"]), tuple(d.get("fold", (0, 0))))


def _groups(values, n_groups, what):
    unique = sorted(set(values))
    if len(unique) < 2:
        raise ConfigError(f"need at least 2 distinct {what}s, got {len(unique)}")
    if n_groups < 1 or n_groups > len(unique):
        raise ConfigError(f"cannot split {len(unique)} {what}s into {n_groups} groups")
    if n_groups == 1:
        raise EmptyTrainError(f"a single {what} group holds every {what}; the training set would be empty")
    return [frozenset(g) for g in np.array_split(np.array(unique, dtype=object), n_groups)]


def make_splits(samples, n_subject_groups, n_pose_groups):
    """All folds of the strict subject x pose cross-validation.

    ``samples`` may be anything exposing ``id``, ``subject_id`` and ``pose_id``
    (attributes or mapping keys).
    """
    def get(s, key):
        return s[key] if isinstance(s, dict) else getattr(s, key)

    rows = [(get(s, "id"), get(s, "subject_id"), get(s, "pose_id")) for s in samples]
    subject_groups = _groups([r[1] for r in rows], n_subject_groups, "subject")
    pose_groups = _groups([r[2] for r in rows], n_pose_groups, "pose")
    plans = []
    for si, sg in enumerate(subject_groups):
        for pi, pg in enumerate(pose_groups):
            test = [i for i, subj, pose in rows if subj in sg and pose in pg]
            train = [i for i, subj, pose in rows if subj not in sg and pose not in pg]
            if not train:
                raise EmptyTrainError(f"fold ({si}, {pi}) leaves no training samples")
            plans.append(SplitPlan(train, test, sg, pg, (si, pi)))
    return plans


def holdout_validation(train_ids, fraction=0.1, seed=0):
    """Split ``train_ids`` into (fit, validation); at least one of each when possible."""
    ids = list(train_ids)
    n_val = max(1, int(round(fraction * len(ids)))) if len(ids) > 1 else 0
    order = np.random.default_rng(seed).permutation(len(ids))
    val = sorted(order[:n_val].tolist())
    fit = sorted(order[n_val:].tolist())
    return [ids[i] for i in fit], [ids[i] for i in val]
