"""Translation proofreading at desk scale: CNN+transformer encoder, CRF error tagger, GRU span corrector."""
from .autograd import Tensor, backward, no_grad
from .corpus import SentencePair, Vocabulary, build_vocab, read_parallel, tokenize
from .correction import TranslationMemory, apply_corrections, decode_correction, gru_step
from .detection import crf_log_partition, crf_neg_log_likelihood, crf_viterbi, detect_errors
from .evaluation import bleu_score, corpus_bleu, detection_metrics
from .lattice import ErrorTag, TagLattice
from .model import ModelConfig, ProofreadingModel
from .synthetic import ErrorSpec, generate_toy_parallel, inject_errors, make_lexicon
from .training import TrainConfig, load_checkpoint, save_checkpoint, sweep, train

__version__ = "0.1.0"
