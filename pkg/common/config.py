"""
Configuration settings for Landmatch
Centralized configuration management for all hardcoded values
"""

# Image Loading Configuration
IMAGE_CONFIG = {
    "supported_extensions": [".png", ".pgm", ".raw"],
    "default_spacing": (1.0, 1.0),
    "target_spacing_mm": 1.0,
    "min_size_px": 16,
    "mask_threshold_fraction": 0.10,  # of max intensity
    "min_component_px": 64,
    "background_value": 0.0
}

# Transformation Configuration
# Affine ranges are calibrated so the median displacement is ~29 px on 256x256 images
TRANSFORM_CONFIG = {
    "intensity_cap": 0.20,
    "intensity_range": (-0.20, 0.20),
    "rotation_deg": (-15.0, 15.0),
    "scale": (0.85, 1.15),
    "shear": (-0.10, 0.10),
    "translation_fraction": (-0.15, 0.15),
    "elastic_blobs": 4,
    "elastic_sigma_fraction": (1.0 / 12.0, 1.0 / 6.0),
    "elastic_amplitude_px": (9.0, 15.0),  # median displacement the blobs are scaled to
    "training_families": ["brightness", "contrast", "rotation", "scaling", "shearing", "elastic"],
    "evaluation_families": ["intensity", "affine", "elastic"]
}

# Model Configuration
MODEL_CONFIG = {
    "encoder_filters": [16, 32, 64, 128, 256],
    "descriptor_blocks": [3, 4],
    "in_channels": 1,
    "head_input": "pairwise"
}

# Training Configuration
TRAIN_CONFIG = {
    "epochs": 50,
    "batch_size": 4,
    "learning_rate": 1e-3,
    "weight_decay": 1e-4,
    "K": 400,
    "cell_px": 8,
    "thresh_pixels": 2.0,
    "m_pos": 0.1,
    "m_neg": 1.0,
    "validation_fraction": 0.10,
    "prefetch_depth": 8,
    "seed": 0
}

# Inference Configuration
INFERENCE_CONFIG = {
    "thresh_landmark": 0.5,
    "cell_px": 8
}

# Baseline Configuration
BASELINE_CONFIG = {
    "octaves": 3,
    "scales_per_octave": 3,
    "sigma": 1.6,
    "contrast_thresh": 0.01,
    "border_px": 1,
    "ratio": 0.75,
    "descriptor_clip": 0.2
}

# Evaluation Configuration
EVALUATION_CONFIG = {
    "curve_thresholds_mm": [0.0, 1.0, 2.0, 4.0, 8.0, 16.0, 32.0, 64.0, 128.0],
    "within_mm": 2.0,
    "gross_error_mm": 64.0,
    "methods": ["proposed", "baseline-inverse-consistency", "baseline-ratio-test"]
}

# Published CT results, used for report captions only
PUBLISHED_CT_REFERENCE = {
    "proposed": {"intensity": "639 (547 - 729)", "affine": "466 (391 - 555)", "elastic": "370 (293 - 452)"},
    "baseline-inverse-consistency": {"intensity": "711 (594 - 862)", "affine": "610 (509 - 749)", "elastic": "542 (450 - 670)"},
    "baseline-ratio-test": {"intensity": "698 (578 - 849)", "affine": "520 (426 - 663)", "elastic": "418 (330 - 541)"}
}

# Synthetic Dataset Configuration
DATASET_CONFIG = {
    "image_size": 96,
    "count": 64,
    "blobs": (6, 14),
    "noise_sigma": 0.04
}

# Application Configuration
APP_CONFIG = {
    "app_name": "Landmatch",
    "version": "1.0.0",
    "debug_mode": False,
    "log_level": "INFO",
    "num_threads_env": "LANDMATCH_NUM_THREADS",
    "checkpoint_format_version": 1
}

# File Paths
PATHS = {
    "env_file": ".env",
    "runs_directory": "./runs",
    "images_directory": "./source_images",
    "pairs_directory": "./pairs",
    "effective_config": "config.effective",
    "checkpoints": "checkpoints",
    "logs": "logs",
    "matches": "matches",
    "reports": "reports",
    "plots": "plots",
    "training_log": "training_log.jsonl",
    "pair_files": {
        "reference": "reference.raw",
        "target": "target.raw",
        "reference_mask": "reference_mask.png",
        "target_mask": "target_mask.png",
        "transform": "transform.json"
    }
}

# Process exit codes
EXIT_CODES = {
    "success": 0,
    "config_error": 1,
    "data_error": 2,
    "numeric_error": 3
}

# Error Messages
ERROR_MESSAGES = {
    "no_images": "No images found!",
    "no_pairs": "No complete pair directories found!",
    "invalid_file_type": "Unsupported file type",
    "missing_checkpoint": "Checkpoint not found: {path}",
    "all_pairs_skipped": "All pair directories were skipped",
    "training_diverged": "Training diverged: non-finite {component} at step {step}",
    "no_landmarks": "No landmarks were sampled in epoch {epoch}; check the valid-mask settings",
    "unknown_command": "Unknown command: {command}"
}

# Success Messages
SUCCESS_MESSAGES = {
    "images_synthesized": "Wrote {count} synthetic images to {path}",
    "pairs_written": "Wrote {count} image pairs to {path}",
    "training_complete": "Training complete! Checkpoint: {path}",
    "matches_written": "Wrote matches for {count} pairs to {path}",
    "report_written": "Report written to {path}",
    "plot_written": "Plot written to {path}"
}
