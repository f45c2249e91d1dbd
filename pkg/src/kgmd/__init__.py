"""Knowledge-graph enhanced multi-domain recommenders on synthetic benchmarks."""

__version__ = "0.1.0"

from .data import (
    DatasetBundle,
    DomainId,
    Interaction,
    InteractionGraph,
    ItemRef,
    KnowledgeGraph,
    build_graph,
    load_interactions,
    neighbors,
    sparsity,
    sparsity_from_counts,
    validate_bundle,
    zero_shot_users,
)
from .bundle_io import load_bundle, write_bundle
from .synthgen import GroundTruth, SynthConfig, generate
from .params import Dims, GradBuffer, ModelConfig, Parameters, init_parameters
from .model import (
    backward,
    cnc_forward,
    encode_item,
    encode_user_base,
    encode_user_gnn,
    encode_user_multidomain,
    forward_score,
    kge_loss,
    mint_forward,
    rec_loss,
    score,
    transe_distance,
)
from .training import (
    TrainConfig,
    sample_negatives_kg,
    sample_negatives_rec,
    train,
    train_all_domains,
    train_kg_embeddings,
)
from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .evaluate import (
    EvalConfig,
    EvalReport,
    brute_force_filtered_rank,
    evaluate,
    eval_candidate_sizes,
    filtered_rank,
    hits_at_k,
    mrr,
    random_ranking_baseline,
    rank_topk,
)
from .gradcheck import grad_check, grad_check_all, model_zoo
