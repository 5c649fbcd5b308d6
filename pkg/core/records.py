import os
from dataclasses import dataclass, field
from typing import List, Tuple

import numpy as np
import pandas as pd

from core.allocation import ArmState
from core.glm import RECORD_COLUMNS, as_frame
from core.hypothesis import TestResult
from core.model import PatientRecord
from core.utils import RarException

PROBABILITY_SUFFIX = '.probs.csv'


@dataclass(frozen=True, eq=False)
class TrialResult:
    stage: np.ndarray
    z: np.ndarray
    arm: np.ndarray
    outcome: np.ndarray
    # (J, K + 1) allocation probabilities used for each block
    probabilities: np.ndarray
    tests: Tuple[TestResult, ...] = field(default=())

    def __post_init__(self):
        n = len(self.stage)
        if not (len(self.z) == len(self.arm) == len(self.outcome) == n):
            raise ValueError('per-patient columns must have equal length')

    @property
    def arms(self) -> int:
        return self.probabilities.shape[1]

    @property
    def K(self) -> int:
        return self.arms - 1

    @property
    def J(self) -> int:
        return self.probabilities.shape[0]

    @property
    def T(self) -> int:
        return len(self.stage)

    @property
    def b(self) -> int:
        return self.T // self.J

    @property
    def totals(self) -> np.ndarray:
        return np.bincount(self.arm, minlength=self.arms)

    @property
    def successes(self) -> np.ndarray:
        return np.bincount(self.arm, weights=self.outcome, minlength=self.arms).astype(int)

    @property
    def failures(self) -> np.ndarray:
        return self.totals - self.successes

    def arm_states(self) -> List[ArmState]:
        return [ArmState(int(s), int(f)) for s, f in zip(self.successes, self.failures)]

    def block_outcomes(self) -> np.ndarray:
        # (J, b) outcome matrix in enrolment order
        return self.outcome.reshape(self.J, self.b)

    def records(self) -> List[PatientRecord]:
        return [PatientRecord(int(j), int(z), int(k), int(y))
                for j, z, k, y in zip(self.stage, self.z, self.arm, self.outcome)]

    def frame(self) -> pd.DataFrame:
        return pd.DataFrame({'stage': self.stage, 'z': self.z, 'arm': self.arm, 'outcome': self.outcome},
                            columns=RECORD_COLUMNS)


def probability_sidecar(path: str) -> str:
    root, _ = os.path.splitext(path)
    return root + PROBABILITY_SUFFIX


def save_trial(result: TrialResult, path: str):
    result.frame().to_csv(path, index=False)
    probs = pd.DataFrame(result.probabilities, columns=[f'pi{k}' for k in range(result.arms)])
    probs.insert(0, 'stage', np.arange(1, result.J + 1))
    probs.to_csv(probability_sidecar(path), index=False, float_format='%.17g')


def read_records(path: str) -> pd.DataFrame:
    try:
        frame = pd.read_csv(path)
    except FileNotFoundError:
        raise RarException(f"patient-record file '{path}' not found")
    try:
        frame = as_frame(frame)
    except ValueError as e:
        raise RarException(f"'{path}': {e}")
    for column in RECORD_COLUMNS:
        frame[column] = frame[column].astype(int)
    if not frame['outcome'].isin([0, 1]).all() or not frame['z'].isin([0, 1]).all():
        raise RarException(f"'{path}': columns z and outcome must be 0/1")
    return frame


def load_trial(path: str) -> TrialResult:
    frame = read_records(path)
    sidecar = probability_sidecar(path)
    try:
        probs = pd.read_csv(sidecar, float_precision='round_trip').sort_values('stage')
    except FileNotFoundError:
        raise RarException(f"allocation-probability sidecar '{sidecar}' not found next to '{path}'")
    probabilities = probs.drop(columns=['stage']).to_numpy(dtype=float)
    J = probabilities.shape[0]
    sizes = frame.groupby('stage').size()
    if len(sizes) != J or sizes.nunique() != 1:
        raise RarException(f"'{path}' must hold {J} stages of equal block size")
    frame = frame.sort_values('stage', kind='stable')
    return TrialResult(stage=frame['stage'].to_numpy(), z=frame['z'].to_numpy(), arm=frame['arm'].to_numpy(),
                       outcome=frame['outcome'].to_numpy(), probabilities=probabilities)
