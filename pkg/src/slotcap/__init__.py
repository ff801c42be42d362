"""Grounded image captioning at desk scale: a pointer-network decoder emits
caption templates with region slots, refinement heads fill the slots with
pluralized fine-grained words, and split builders plus grounding-aware
metrics round out the pipeline."""

from .corpus import (BoundingBox, RegionProposal, ImageRecord, CategoryMap,
                     Vocabulary, AnnotatedToken, Corpus, iou,
                     location_feature, filter_proposals, build_vocabulary,
                     extract_visual_words, match_grounding_regions,
                     build_corpus, load_corpus, tokenize)
from .model import (ModelConfig, ModelParams, DecoderState, StepOutput,
                    init_params, region_feature, attend, step, refine,
                    save_checkpoint, load_checkpoint)
from .training import (TrainConfig, LossBreakdown, token_loss, sequence_loss,
                       fit)
from .inference import (Template, DecodeConfig, Slot, decode_step_choice,
                        greedy_decode, fill_slot, beam_decode,
                        constrained_beam_decode, decode)
from .splits import (CooccurrenceMatrix, SplitAssignment, cooccurrence,
                     build_robust_split, build_exclusion_split)
from .evaluation import (EvalReport, bleu_n, corpus_bleu,
                         compositional_accuracy, novel_object_f1,
                         grounding_accuracy)

__all__ = [name for name in dir() if not name.startswith("_")]
