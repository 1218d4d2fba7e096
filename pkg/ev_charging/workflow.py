"""Chain named pipeline stages into a LangGraph state graph.

A stage is a callable taking the pipeline state (and optionally the
`RunnableConfig`) and returning a partial state update. Stages run in the
order given, from START to END.
"""

import inspect
import logging
import operator
import time
from typing import Annotated, Any, Callable, NamedTuple, Optional, Sequence, TypedDict

from langchain_core.runnables import RunnableConfig
from langgraph.graph import END, START, StateGraph

logger = logging.getLogger(__name__)


class PipelineState(TypedDict, total=False):
    """Values passed between stages.

    `outputs` and `timings` accumulate across stages; every other key is
    overwritten by the stage that returns it.
    """

    trace: Any
    test_trace: Any
    prices: Any
    counts: Any
    exit_prob: Any
    model: Any
    solutions: Any
    policies: Any
    summary: Any
    outputs: Annotated[list[str], operator.add]
    timings: Annotated[list[tuple[str, float]], operator.add]


StageFn = Callable[..., dict[str, Any]]


class Stage(NamedTuple):
    name: str
    fn: StageFn


def _accepts_config(fn: StageFn) -> bool:
    try:
        return "config" in inspect.signature(fn).parameters
    except (TypeError, ValueError):
        return False


def _make_call_stage(stage: Stage) -> Callable[[PipelineState, RunnableConfig], dict[str, Any]]:
    with_config = _accepts_config(stage.fn)

    def call_stage(state: PipelineState, config: RunnableConfig) -> dict[str, Any]:
        started = time.perf_counter()
        logger.info("Stage %s: started", stage.name)
        update = stage.fn(state, config=config) if with_config else stage.fn(state)
        if update is None:
            update = {}
        if not isinstance(update, dict):
            raise TypeError(f"stage '{stage.name}' must return a dict, got {type(update).__name__}")
        elapsed = time.perf_counter() - started
        logger.info("Stage %s: done in %.2fs", stage.name, elapsed)
        return {**update, "timings": [(stage.name, elapsed)]}

    return call_stage


def create_workflow(
    stages: Sequence[Stage | tuple[str, StageFn]],
    *,
    state_schema: Optional[type] = None,
) -> StateGraph:
    """Create a linear pipeline graph.

    Args:
        stages: Named stage callables, run in order.
        state_schema: State type; defaults to `PipelineState`.

    Returns:
        An uncompiled `StateGraph`; call `.compile()` to run it.

    Raises:
        ValueError: no stages, an unnamed stage or a duplicate name.
    """
    if not stages:
        raise ValueError("A workflow needs at least one stage.")

    named = [Stage(*stage) for stage in stages]
    stage_names: set[str] = set()
    for stage in named:
        if not stage.name or not isinstance(stage.name, str):
            raise ValueError("Please give every stage a non-empty name.")
        if stage.name in stage_names:
            raise ValueError(f"Stage with name '{stage.name}' already exists. Stage names must be unique.")
        if not callable(stage.fn):
            raise ValueError(f"Stage '{stage.name}' is not callable.")
        stage_names.add(stage.name)

    builder = StateGraph(state_schema or PipelineState)
    previous = START
    for stage in named:
        builder.add_node(stage.name, _make_call_stage(stage))
        builder.add_edge(previous, stage.name)
        previous = stage.name
    builder.add_edge(previous, END)
    return builder
