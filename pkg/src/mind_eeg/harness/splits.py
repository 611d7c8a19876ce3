"""Subject-dependent and leave-one-subject-out split plans, plus leak audits."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .data import EEGDataset

PROTOCOLS = ("dep", "threefold", "mped", "loso")


class SplitError(ValueError):
    pass


@dataclass
class SplitPlan:
    name: str
    train_ids: np.ndarray
    test_ids: np.ndarray
    granularity: str = "trial"  # or "subject"

    def __post_init__(self):
        self.train_ids = np.asarray(self.train_ids, dtype=np.int64)
        self.test_ids = np.asarray(self.test_ids, dtype=np.int64)


def _plan(name, train_mask, test_mask, granularity="trial") -> SplitPlan:
    return SplitPlan(name, np.flatnonzero(train_mask), np.flatnonzero(test_mask), granularity)


def _seed_iv(ds: EEGDataset, subject: int) -> SplitPlan:
    """Last two trials of every class in each session are held out."""
    sub = ds.subjects == subject
    test = np.zeros(len(ds), dtype=bool)
    for ses in np.unique(ds.sessions[sub]):
        here = sub & (ds.sessions == ses)
        for c in range(ds.classes):
            trials = np.unique(ds.trials[here & (ds.labels == c)])
            if trials.size == 0:
                continue
            if trials.size < 3:
                raise SplitError(f"subject {subject} session {ses} class {c}: {trials.size} trials, "
                                 "the last-two-trials protocol needs at least 3")
            test |= here & np.isin(ds.trials, trials[-2:])
    return _plan(f"subject{subject}", sub & ~test, test)


def _three_fold(ds: EEGDataset, subject: int) -> list[SplitPlan]:
    """Each session's trials cut into first/middle/last thirds; each third is one test fold."""
    sub = ds.subjects == subject
    folds = [np.zeros(len(ds), dtype=bool) for _ in range(3)]
    for ses in np.unique(ds.sessions[sub]):
        here = sub & (ds.sessions == ses)
        trials = np.unique(ds.trials[here])
        if trials.size < 3:
            raise SplitError(f"subject {subject} session {ses}: {trials.size} trials, three folds need 3")
        for k, chunk in enumerate(np.array_split(trials, 3)):
            folds[k] |= here & np.isin(ds.trials, chunk)
    return [_plan(f"subject{subject}_fold{k}", sub & ~test, test) for k, test in enumerate(folds)]


def _mped(ds: EEGDataset, subject: int) -> SplitPlan:
    """First three quarters of the trials (21 of 28) train, the rest test."""
    sub = ds.subjects == subject
    test = np.zeros(len(ds), dtype=bool)
    for ses in np.unique(ds.sessions[sub]):
        here = sub & (ds.sessions == ses)
        trials = np.unique(ds.trials[here])
        if trials.size < 4:
            raise SplitError(f"subject {subject} session {ses}: {trials.size} trials, need at least 4")
        n_train = int(round(0.75 * trials.size))
        test |= here & np.isin(ds.trials, trials[n_train:])
    return _plan(f"subject{subject}", sub & ~test, test)


def split_subject_dependent(ds: EEGDataset, protocol: str = "dep") -> list[SplitPlan]:
    """Per-subject trial splits: ``dep`` (last two trials per class), ``threefold``, or ``mped``."""
    plans: list[SplitPlan] = []
    for s in np.unique(ds.subjects):
        if protocol == "dep":
            plans.append(_seed_iv(ds, s))
        elif protocol == "threefold":
            plans.extend(_three_fold(ds, s))
        elif protocol == "mped":
            plans.append(_mped(ds, s))
        else:
            raise SplitError(f"unknown subject-dependent protocol {protocol!r}")
    return plans


def split_loso(ds: EEGDataset) -> list[SplitPlan]:
    """One plan per subject; all of that subject's sessions form the test set."""
    subjects = np.unique(ds.subjects)
    if subjects.size < 2:
        raise SplitError("leave-one-subject-out needs at least two subjects")
    return [_plan(f"loso_subject{s}", ds.subjects != s, ds.subjects == s, "subject") for s in subjects]


def make_plans(ds: EEGDataset, protocol: str) -> list[SplitPlan]:
    if protocol == "loso":
        return split_loso(ds)
    return split_subject_dependent(ds, protocol)


def audit_plan(ds: EEGDataset, plan: SplitPlan) -> None:
    """Raise :class:`SplitError` if the plan leaks at its declared granularity."""
    train, test = plan.train_ids, plan.test_ids
    if test.size == 0:
        raise SplitError(f"{plan.name}: empty test set")
    if np.intersect1d(train, test).size:
        raise SplitError(f"{plan.name}: sample ids on both sides")
    if train.size and (train.max() >= len(ds) or train.min() < 0) or test.max() >= len(ds) or test.min() < 0:
        raise SplitError(f"{plan.name}: ids outside the dataset")
    if plan.granularity == "subject":
        keys_train = set(ds.subjects[train].tolist())
        keys_test = set(ds.subjects[test].tolist())
    else:
        def keys(ids):
            return set(zip(ds.subjects[ids].tolist(), ds.sessions[ids].tolist(), ds.trials[ids].tolist()))
        keys_train, keys_test = keys(train), keys(test)
    shared = keys_train & keys_test
    if shared:
        raise SplitError(f"{plan.name}: {plan.granularity} {sorted(shared)[0]} appears in train and test")
