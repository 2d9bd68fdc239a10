"""Co-trained dimension reduction and SWING-guided contrastive learning for DLRM-style recommenders."""

__version__ = "0.1.0"
