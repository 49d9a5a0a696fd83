"""Patch aligned contrastive learning (PACL) at desk scale."""
