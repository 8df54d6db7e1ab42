"""pfgkit: generate and evaluate life-cycle process flow graphs."""

from .model import (
    LifeCyclePhase,
    PHASES,
    ProcessFlowGraph,
    ProcessNode,
    ProductCategory,
    Violation,
    dumps_graph_json,
    graph_from_json_dict,
    graph_to_json_dict,
    load_graph_json,
    make_node,
    node_id,
    parse_document,
    save_graph_json,
    serialize_graph,
    topological_order,
    validate_graph,
)
from .gateway import (
    ChatRequest,
    CostMeter,
    EmbeddingVector,
    Gateway,
    LlmTranscript,
    ScoredSequence,
    load_price_table,
)
from .providers import HttpProvider, MockProvider
from .clustering import ClusteringConfig, ClusterSolution, davies_bouldin, kmeans, select_k
from .pipeline import (
    CoarseProcess,
    PipelineConfig,
    RawProcess,
    RunReport,
    SampleProduct,
    run_pipeline,
)
from .baselines import BaselineKind, run_baseline
from .evaluation import (
    EvalReport,
    PairingRecord,
    PairingTally,
    bleu,
    llm_judge,
    normalized_pmi,
    pmi,
    preprocess_truth,
    qual_scores,
    rouge_l,
    tally_pairings,
)

__version__ = "0.1.0"
