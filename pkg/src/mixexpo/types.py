"""Types used in mixexpo."""

from typing import Literal

__all__ = [
    'MaskPolarity',
    'NormKind',
    'PerceptualLayer',
    'DegradationMode',
    'RegionLayout',
]

# 'under': the predicted mask marks underexposed pixels (supervised by 1 - M_gt)
# 'over': the predicted mask is supervised by M_gt directly
MaskPolarity = Literal['under', 'over']
NormKind = Literal['masked', 'in']
PerceptualLayer = Literal['relu1_2', 'relu2_2', 'relu3_3', 'relu4_3']
DegradationMode = Literal['gain', 'gamma']
RegionLayout = Literal['blobs', 'vertical', 'horizontal']
