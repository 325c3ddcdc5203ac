"""Evolutionary multitasking toolkit.

Jointly solves K black-box tasks with online inter-task transfer, plus
recipe wrappers (multi-fidelity, bilevel, multi-scenario) and the
double-pole-balancing neuroevolution benchmark.
"""
from .problems import (
    BenchmarkSpec,
    MultitaskProblem,
    ProblemError,
    TaskDefinition,
    assemble_mto,
    decode,
    encode,
    evaluate,
    make_benchmark,
)
from .engine import (
    EvolverConfig,
    Population,
    RunResult,
    UnifiedIndividual,
    factorial_ranks,
    gaussian_mutation,
    init_population,
    run_cea,
    sbx_crossover,
    task_rng,
)
from .transfer import (
    MultitaskRunResult,
    SearchDistributionModel,
    TransferMatrix,
    fit_task_model,
    map_between_tasks,
    mixture_density,
    run_adaptive_emt,
    run_explicit_emt,
    run_mfea,
    update_transfer_matrix,
)
from .recipes import (
    BilevelProblem,
    BilevelResult,
    FidelityStack,
    ScenarioSet,
    build_multifidelity,
    build_multiscenario,
    make_minimax,
    solve_bilevel,
)
from .polecart import (
    EpisodeResult,
    PoleCartParams,
    controller_force,
    dynamics,
    make_polecart_tasks,
    rk4_step,
    simulate_episode,
    success_rate,
)

__version__ = "0.1.0"
