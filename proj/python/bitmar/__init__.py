from ._bitmar import (
    ConfigError,
    FormatError,
    Model,
    cache_arrivals,
    cli,
    config_text,
    decode,
    encode,
    infonce,
    quantization_effectiveness,
    quantize_activations,
    quantize_weights,
    read_feature_item,
    read_token_file,
    total_loss,
    write_feature_file,
    write_token_file,
)

__all__ = [
    "ConfigError",
    "FormatError",
    "Model",
    "cache_arrivals",
    "cli",
    "config_text",
    "decode",
    "encode",
    "infonce",
    "quantization_effectiveness",
    "quantize_activations",
    "quantize_weights",
    "read_feature_item",
    "read_token_file",
    "total_loss",
    "write_feature_file",
    "write_token_file",
]
