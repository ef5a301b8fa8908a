"""ID embedding pre-training with contrastive and BCE losses on a synthetic engagement world."""
