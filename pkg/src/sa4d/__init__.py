"""sa4d: identity-feature splatting and temporal identity fields over
deforming 3D Gaussian scenes, with segmentation refinement, a Gaussian
identity table, and object-level editing."""

from .scene import (Camera, CanonicalScene, Gaussian, SplatFootprint,
                    gaussian_alpha, project_gaussian)
from .deformation import (DeformedScene, MotionProgram, Track, Trajectory,
                          export_scene, ground_truth_labels)
from .splatting import (RenderOutput, RenderPlan, backward_payload, compute_plan,
                        render, render_reference)
from .field import (AdamState, IdentityFieldParams, PositionalEncodingConfig,
                    adam_step, classify, classifier_logits, encode, field_backward,
                    field_forward, load_checkpoint, save_checkpoint)
from .losses import LossConfig, NeighborIndex, loss_2d, loss_3d, loss_proj
from .pipeline import (IdentityTable, RefinementConfig, TrainingFrame, build_table,
                       lookup, prune_boundary, remove_outliers, segment_at, train)
from .editing import EditScript, apply_edits, render_anything_mask
from .synth import Dataset, NoiseModel, SceneSpec, generate_scene
from .evaluation import MetricsReport, evaluate

__version__ = "0.1.0"
