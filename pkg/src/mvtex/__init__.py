"""Multi-view consistent PBR texture generation at desk scale.

Pipeline: procedural assets -> G-buffers and cross-view correspondences ->
toy dual-branch diffusion with occlusion-aware multi-view attention ->
guided sampling -> tri-plane fusion -> UV texture baking -> PBR rendering.
"""

__version__ = "0.1.0"
