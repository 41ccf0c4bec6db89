"""Structure invariant attack laboratory."""
