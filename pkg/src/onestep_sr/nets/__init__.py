from .autoencoder import AutoEncoder, images_to_tensor, tensor_to_images
from .checkpoint import (
    load_autoencoder,
    load_student,
    load_velocity,
    module_checksum,
    save_autoencoder,
    save_student,
    save_velocity,
)
from .lora import LoRAConv2d, LoRALinear, adapter_parameters, base_parameters, lora_layers, lora_wrap
from .student import Student
from .velocity import VelocityNet, cfg_predict

__all__ = [
    "AutoEncoder", "LoRAConv2d", "LoRALinear", "Student", "VelocityNet", "adapter_parameters",
    "base_parameters", "cfg_predict", "images_to_tensor", "load_autoencoder", "load_student",
    "load_velocity", "lora_layers", "lora_wrap", "module_checksum", "save_autoencoder",
    "save_student", "save_velocity", "tensor_to_images",
]
