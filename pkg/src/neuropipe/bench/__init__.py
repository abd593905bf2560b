from .harness import (
    BenchReport,
    IntegrationCase,
    IntentCase,
    PreprocCase,
    aggregate,
    load_cases,
    run_integration_bench,
    run_intent_bench,
    run_preproc_bench,
    template_preproc_generator,
    write_aggregate,
)

__all__ = [
    "BenchReport",
    "IntegrationCase",
    "IntentCase",
    "PreprocCase",
    "aggregate",
    "load_cases",
    "run_integration_bench",
    "run_intent_bench",
    "run_preproc_bench",
    "template_preproc_generator",
    "write_aggregate",
]
