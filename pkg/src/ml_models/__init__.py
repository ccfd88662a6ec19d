"""NF-iVAE latent model"""
