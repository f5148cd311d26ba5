from .scenario import ScenarioConfig, StubFidelity, make_embedding_table, stage_rng, synth_dataset
from .simulate import SimulationConfig, SimulationResult, StageError, simulate
from .stub import DetectorStub, SceneObject, stub_predict

__all__ = [
    "DetectorStub",
    "ScenarioConfig",
    "SceneObject",
    "SimulationConfig",
    "SimulationResult",
    "StageError",
    "StubFidelity",
    "make_embedding_table",
    "simulate",
    "stage_rng",
    "stub_predict",
    "synth_dataset",
]
