"""Prosody-conditioned speaker adaptation toolkit.

Subpackages and modules:

- ``dsp``: WAV I/O, framing, mel spectrograms, energy tracks
- ``pitch``: YIN pitch tracking
- ``prosody``: utterance and speaker prosodic features
- ``conditioning``: decoder-input assembly, masks, speaker tables
- ``toymodel``: synthetic corpus, duration-upsampled decoder, trainer
- ``evaluation``: MCC, DTW, MCD, F0 RMSE
- ``experiment`` / ``cli``: the end-to-end comparison and its front-end
"""

__version__ = "0.1.0"
