"""Citation-dynamics toolkit: graph construction and contrastive GNN training
for predicting the citations a paper will gain over a future horizon."""

__version__ = "0.1.0"
