from .checkpoint import load_model, read_checkpoint, save_checkpoint
from .data import (AugmentPolicy, DatasetSplit, POLICIES, augment, balance_dataset, class_subset,
                   class_subset_indices, flip_only, load_image_dir, resolve_policy, synthetic_dataset)
from .loop import (STUDENT_CONFIG, TEACHER_CONFIG, DivergenceError, EvalResult, TeacherCache, TrainConfig,
                   TrainResult, evaluate, train_student, train_teacher)
from .metrics import MetricsLog, read_metrics
from .optim import OptimizerState, init_optimizer, optimizer_step
from .schedule import ScheduleConfig, schedule_lr
from .sweep import SweepConfig, SweepResult, SweepRow, run_sweep, write_rows_csv, write_sweep_csv
