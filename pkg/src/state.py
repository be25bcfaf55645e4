from typing import TypedDict, Optional, List, Dict, Any


class RunState(TypedDict):
    command: str
    config_path: Optional[str]
    output_dir: str
    seed: int
    model: Optional[str]  # simulate model tag, e.g. "fpe:cle"
    artifacts: List[str]
    audits: Dict[str, Any]  # leak/mass/energy checks written to metadata.json
    detailed_balance: Optional[bool]  # None when the command does not decide it
    error: Optional[str]
    error_kind: Optional[str]
    messages: List[str]


def new_run_state(command: str, output_dir: str, seed: int, config_path: Optional[str] = None) -> RunState:
    return RunState(
        command=command,
        config_path=config_path,
        output_dir=output_dir,
        seed=seed,
        model=None,
        artifacts=[],
        audits={},
        detailed_balance=None,
        error=None,
        error_kind=None,
        messages=[],
    )
